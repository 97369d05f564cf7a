#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refdiff/image.hpp"
#include "refdiff/rng.hpp"

namespace refdiff {

// everything the renderer needs to draw one subject family. all images in a
// group share one topic; only geometry and phases vary per image.
struct TopicSpec {
    int shape = 0;    // index into shape_names()
    int color = 0;    // subject color, index into color_names()
    int background = 0; // index into background_names()
    int bg_color_a = 0; // primary background color
    int bg_color_b = 0; // secondary color for patterned backgrounds
};

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();
const std::vector<std::string>& background_names();

// palette entry backing a color index, RGB in [-1,1]
std::array<double, 3> color_rgb(int color_index);

// "a red circle on a striped background"
std::string caption_for(const TopicSpec& t);

struct BBox {
    int64_t y0 = 0, x0 = 0, h = 0, w = 0;
};

struct RefImage {
    ImageTensor image;
    std::string caption;
    BBox bbox;           // subject bounds, pixel units
    bool quality = true; // subject/background contrast above threshold;
                         // gates training-target eligibility only
    bool eval_target = false; // designated evaluation target (split rules)
};

struct GroupRecord {
    int64_t id = 0;
    TopicSpec topic;
    std::vector<RefImage> images;
    std::string split = "train"; // train | held-in | held-out |
                                 // stress-aligned | stress-misaligned
};

struct DatasetSpec {
    int64_t groups = 50;
    int64_t min_group = 2;
    int64_t max_group = 8; // generator supports up to 28
    int64_t min_side = 12; // sides are even (denoiser patch size)
    int64_t max_side = 20;
    bool misalignment = true;   // per-image subject position jitter
    int64_t stressor_pairs = 0; // extra aligned/misaligned group pairs,
                                // same topic within a pair, eval-only
};

// deterministic procedural renderer. per-group streams are derived from
// (seed, group id), so the same spec+seed is bit-identical regardless of
// generation order.
std::vector<GroupRecord> generate_dataset(const DatasetSpec& spec, uint64_t seed);

ImageTensor render_subject(const TopicSpec& topic, int64_t h, int64_t w, double cy, double cx,
                           double radius, double phase);

// contrast score backing the quality flag: mean luminance gap between the
// subject box interior and a surrounding background ring
double subject_contrast(const ImageTensor& img, const BBox& box);

// frozen embedding functions used for filtering and metrics. probe-A is the
// image-text pair, probe-B image-only; all outputs are unit-norm rows.
struct ProbeSet {
    std::function<std::vector<double>(const ImageTensor&)> a_image;
    std::function<std::vector<double>(const std::string&)> a_text;
    std::function<std::vector<double>(const ImageTensor&)> b_image;
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct FilterThresholds {
    double group_consistency = -1.0; // mean pairwise image similarity floor
    double caption_match = -1.0;     // probe-A image/text similarity floor
};

// removes images whose mean similarity against the rest of their group (or
// whose caption match) falls below threshold; drops groups shrinking past 2
std::vector<GroupRecord> filter_groups(const std::vector<GroupRecord>& manifest,
                                       const ProbeSet& probes, const FilterThresholds& th);

// labels groups held-out / held-in / train and designates evaluation
// targets: every image of a held-out (or stressor) group, one
// quality-eligible image of a held-in group
std::vector<GroupRecord> make_splits(std::vector<GroupRecord> manifest, int64_t held_out,
                                     int64_t held_in, uint64_t seed);

// image indices a training draw may touch: whole group for train splits,
// everything but the designated target for held-in, nothing for the rest
std::vector<size_t> training_visible(const GroupRecord& g);
// subset of training_visible eligible as the denoising target
std::vector<size_t> training_targets(const GroupRecord& g);

struct AuditReport {
    int64_t leaked_hashes = 0;     // eval-only content reachable by training
    int64_t duplicate_hashes = 0;  // identical renders across groups
    int64_t bad_group_sizes = 0;   // outside [2,28]
    int64_t missing_targets = 0;   // eval group without a designated target
    bool ok() const {
        return leaked_hashes == 0 && duplicate_hashes == 0 && bad_group_sizes == 0 &&
               missing_targets == 0;
    }
};

// independent re-derivation from split labels and image content hashes;
// guards the exclusion contract end to end
AuditReport audit_dataset(const std::vector<GroupRecord>& manifest);

// disk layout: <dir>/manifest.jsonl (one record per image) plus
// <dir>/images/gNNNN_iNN.ppm and a lossless .tns sidecar per image. the
// sidecar is the source of truth; the PPM is for eyeballs.
void save_dataset(const std::string& dir, const std::vector<GroupRecord>& manifest);
std::vector<GroupRecord> load_dataset(const std::string& dir);

} // namespace refdiff
