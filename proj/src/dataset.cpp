#include "refdiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace refdiff {

namespace {

struct Rgb {
    double r, g, b;
};

const std::vector<Rgb>& palette() {
    static const std::vector<Rgb> p = {
        {0.90, -0.80, -0.80}, // red
        {-0.70, 0.80, -0.70}, // green
        {-0.80, -0.60, 0.90}, // blue
        {0.90, 0.80, -0.80},  // yellow
        {0.90, -0.70, 0.90},  // magenta
        {-0.80, 0.80, 0.90},  // cyan
        {0.90, 0.15, -0.80},  // orange
        {0.90, 0.90, 0.90},   // white
    };
    return p;
}

// background color at a subsample point, before the subject is composited
Rgb background_at(const TopicSpec& t, double y, double x, int64_t h, int64_t w, double phase) {
    const Rgb a = palette()[size_t(t.bg_color_a)];
    const Rgb b = palette()[size_t(t.bg_color_b)];
    switch (t.background) {
        case 0: // solid
            return a;
        case 1: { // horizontal stripes, 3px bands
            double band = 3.0;
            int64_t k = int64_t(std::floor((y + phase * 2.0 * band) / band));
            return (k % 2 + 2) % 2 == 0 ? a : b;
        }
        case 2: { // checkerboard, 3px cells
            double cell = 3.0;
            double off = phase * 2.0 * cell;
            int64_t ky = int64_t(std::floor((y + off) / cell));
            int64_t kx = int64_t(std::floor((x + off) / cell));
            return ((ky + kx) % 2 + 2) % 2 == 0 ? a : b;
        }
        case 3: { // linear gradient, direction flips on phase
            double s = phase < 0.5 ? y / double(h) : x / double(w);
            return {a.r + (b.r - a.r) * s, a.g + (b.g - a.g) * s, a.b + (b.b - a.b) * s};
        }
        default: { // dot grid, 4px pitch
            double pitch = 4.0;
            double off = phase * pitch;
            double dy = std::fmod(y + off, pitch) - pitch / 2.0;
            double dx = std::fmod(x + off, pitch) - pitch / 2.0;
            return dy * dy + dx * dx <= 1.3 * 1.3 ? b : a;
        }
    }
}

bool inside_shape(int shape, double dy, double dx, double r) {
    switch (shape) {
        case 0: // circle
            return dy * dy + dx * dx <= r * r;
        case 1: { // ring
            double d2 = dy * dy + dx * dx;
            double ri = 0.55 * r;
            return d2 <= r * r && d2 >= ri * ri;
        }
        case 2: // square
            return std::max(std::abs(dy), std::abs(dx)) <= 0.9 * r;
        case 3: // diamond
            return std::abs(dy) + std::abs(dx) <= r;
        case 4: { // triangle, apex up
            if (std::abs(dy) > r) return false;
            double hw = 0.9 * r * (dy + r) / (2.0 * r);
            return std::abs(dx) <= hw;
        }
        default: // cross
            return (std::abs(dx) <= 0.33 * r && std::abs(dy) <= r) ||
                   (std::abs(dy) <= 0.33 * r && std::abs(dx) <= r);
    }
}

constexpr double kQualityContrast = 0.12;

TopicSpec draw_topic(RandomSource& rs) {
    TopicSpec t;
    t.shape = int(rs.uniform_int(0, int64_t(shape_names().size()) - 1));
    t.color = int(rs.uniform_int(0, int64_t(color_names().size()) - 1));
    t.background = int(rs.uniform_int(0, int64_t(background_names().size()) - 1));
    t.bg_color_a = int(rs.uniform_int(0, int64_t(color_names().size()) - 1));
    t.bg_color_b = int(rs.uniform_int(0, int64_t(color_names().size()) - 1));
    // a subject the exact color of a solid background (or a pattern whose two
    // tones coincide) renders a featureless frame; every member of such a
    // group would be pixel-identical, which breaks hash-based hygiene
    if (t.background == 0) {
        while (t.bg_color_a == t.color)
            t.bg_color_a = int(rs.uniform_int(0, int64_t(color_names().size()) - 1));
    } else {
        while (t.bg_color_b == t.bg_color_a)
            t.bg_color_b = int(rs.uniform_int(0, int64_t(color_names().size()) - 1));
    }
    return t;
}

int64_t draw_even(RandomSource& rs, int64_t lo, int64_t hi) {
    return 2 * rs.uniform_int((lo + 1) / 2, hi / 2);
}

RefImage draw_member_once(const TopicSpec& topic, RandomSource& rs, int64_t h, int64_t w,
                          bool aligned, double fy, double fx, double fr) {
    double side = double(std::min(h, w));
    double r = std::min(fr * rs.uniform(0.9, 1.1) * side, side / 2.0 - 2.0);
    double lo_y = r + 1.0, hi_y = double(h) - r - 1.0;
    double lo_x = r + 1.0, hi_x = double(w) - r - 1.0;
    double cy, cx;
    if (aligned) {
        cy = std::clamp(fy * double(h), lo_y, std::max(lo_y, hi_y));
        cx = std::clamp(fx * double(w), lo_x, std::max(lo_x, hi_x));
        rs.uniform(); // keep stream consumption identical to the jittered arm
        rs.uniform();
    } else {
        cy = rs.uniform(lo_y, std::max(lo_y, hi_y));
        cx = rs.uniform(lo_x, std::max(lo_x, hi_x));
    }
    double phase = rs.uniform();

    RefImage out;
    out.image = render_subject(topic, h, w, cy, cx, r, phase);
    out.caption = caption_for(topic);
    int64_t y0 = std::max<int64_t>(0, int64_t(std::floor(cy - r)));
    int64_t x0 = std::max<int64_t>(0, int64_t(std::floor(cx - r)));
    int64_t y1 = std::min<int64_t>(h, int64_t(std::ceil(cy + r)));
    int64_t x1 = std::min<int64_t>(w, int64_t(std::ceil(cx + r)));
    out.bbox = {y0, x0, y1 - y0, x1 - x0};
    out.quality = subject_contrast(out.image, out.bbox) > kQualityContrast;
    return out;
}

// renders until the image is distinct from every earlier render. shapes with
// axis-aligned edges rasterize on the subsample grid, so nearby geometry can
// tie pixel-for-pixel; hash-based split hygiene needs globally unique frames.
RefImage draw_member(const TopicSpec& topic, RandomSource& rs, int64_t h, int64_t w, bool aligned,
                     double fy, double fx, double fr, std::set<uint64_t>& seen) {
    for (int tries = 0; tries < 64; tries++) {
        RefImage im = draw_member_once(topic, rs, h, w, aligned, fy, fx, fr);
        if (seen.insert(image_hash(im.image)).second) return im;
    }
    throw std::runtime_error("dataset: cannot render a distinct image; spec too degenerate");
}

GroupRecord make_group(int64_t id, uint64_t gseed, const DatasetSpec& spec,
                       std::set<uint64_t>& seen) {
    RandomSource rs(gseed);
    GroupRecord g;
    g.id = id;
    g.topic = draw_topic(rs);
    int64_t size = rs.uniform_int(spec.min_group, spec.max_group);
    double fy = rs.uniform(0.40, 0.60), fx = rs.uniform(0.40, 0.60);
    double fr = rs.uniform(0.22, 0.32);
    for (int64_t i = 0; i < size; i++) {
        int64_t h = draw_even(rs, spec.min_side, spec.max_side);
        int64_t w = draw_even(rs, spec.min_side, spec.max_side);
        g.images.push_back(draw_member(g.topic, rs, h, w, !spec.misalignment, fy, fx, fr, seen));
    }
    return g;
}

// one arm of a stressor pair: shared topic/size/side, only position policy
// differs, which is exactly the variable the misalignment probe isolates
GroupRecord make_stress_group(int64_t id, uint64_t gseed, const TopicSpec& topic, int64_t size,
                              int64_t side, bool aligned, std::set<uint64_t>& seen) {
    RandomSource rs(gseed);
    GroupRecord g;
    g.id = id;
    g.topic = topic;
    g.split = aligned ? "stress-aligned" : "stress-misaligned";
    double fy = rs.uniform(0.42, 0.58), fx = rs.uniform(0.42, 0.58);
    double fr = rs.uniform(0.24, 0.30);
    for (int64_t i = 0; i < size; i++)
        g.images.push_back(draw_member(topic, rs, side, side, aligned, fy, fx, fr, seen));
    return g;
}

bool all_quality(const GroupRecord& g) {
    for (const RefImage& im : g.images)
        if (!im.quality) return false;
    return true;
}

int name_index(const std::vector<std::string>& names, const std::string& s,
               const char* what) {
    auto it = std::find(names.begin(), names.end(), s);
    if (it == names.end())
        throw std::runtime_error(std::string("manifest: unknown ") + what + ": " + s);
    return int(it - names.begin());
}

} // namespace

const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> n = {"circle", "ring",     "square",
                                               "diamond", "triangle", "cross"};
    return n;
}

const std::vector<std::string>& color_names() {
    static const std::vector<std::string> n = {"red",     "green", "blue",   "yellow",
                                               "magenta", "cyan",  "orange", "white"};
    return n;
}

const std::vector<std::string>& background_names() {
    static const std::vector<std::string> n = {"solid", "stripes", "checker", "gradient", "dots"};
    return n;
}

std::array<double, 3> color_rgb(int color_index) {
    const Rgb& c = palette().at(size_t(color_index));
    return {c.r, c.g, c.b};
}

std::string caption_for(const TopicSpec& t) {
    const std::string& subj = color_names()[size_t(t.color)];
    const std::string& shape = shape_names()[size_t(t.shape)];
    const std::string& ca = color_names()[size_t(t.bg_color_a)];
    const std::string& cb = color_names()[size_t(t.bg_color_b)];
    std::string head = "a " + subj + " " + shape + " on a ";
    switch (t.background) {
        case 0: return head + "plain " + ca + " background";
        case 1: return head + ca + " and " + cb + " striped background";
        case 2: return head + ca + " and " + cb + " checkered background";
        case 3: return head + ca + " to " + cb + " gradient background";
        default: return head + ca + " background with " + cb + " dots";
    }
}

ImageTensor render_subject(const TopicSpec& topic, int64_t h, int64_t w, double cy, double cx,
                           double radius, double phase) {
    ImageTensor img = make_image(3, h, w);
    const Rgb subj = palette()[size_t(topic.color)];
    // 2x2 supersampling: coverage-weighted blend of subject over background
    const double sub[2] = {0.25, 0.75};
    for (int64_t y = 0; y < h; y++) {
        for (int64_t x = 0; x < w; x++) {
            double r_acc = 0, g_acc = 0, b_acc = 0;
            for (double oy : sub) {
                for (double ox : sub) {
                    double sy = double(y) + oy, sx = double(x) + ox;
                    Rgb c = background_at(topic, sy, sx, h, w, phase);
                    if (inside_shape(topic.shape, sy - cy, sx - cx, radius)) c = subj;
                    r_acc += c.r;
                    g_acc += c.g;
                    b_acc += c.b;
                }
            }
            // pixels are rounded to f32-representable values so the disk
            // sidecar round-trips bit-exactly in either engine precision
            img.at(0, y, x) = double(float(r_acc / 4.0));
            img.at(1, y, x) = double(float(g_acc / 4.0));
            img.at(2, y, x) = double(float(b_acc / 4.0));
        }
    }
    return img;
}

double subject_contrast(const ImageTensor& img, const BBox& box) {
    // per-channel mean gap between the box interior and a 2px ring around it
    int64_t ry0 = std::max<int64_t>(0, box.y0 - 2);
    int64_t rx0 = std::max<int64_t>(0, box.x0 - 2);
    int64_t ry1 = std::min<int64_t>(img.height, box.y0 + box.h + 2);
    int64_t rx1 = std::min<int64_t>(img.width, box.x0 + box.w + 2);
    double gap = 0.0;
    for (int64_t c = 0; c < img.channels; c++) {
        double in_sum = 0, ring_sum = 0;
        int64_t in_n = 0, ring_n = 0;
        for (int64_t y = ry0; y < ry1; y++) {
            for (int64_t x = rx0; x < rx1; x++) {
                bool inside = y >= box.y0 && y < box.y0 + box.h && x >= box.x0 &&
                              x < box.x0 + box.w;
                if (inside) {
                    in_sum += img.at(c, y, x);
                    in_n++;
                } else {
                    ring_sum += img.at(c, y, x);
                    ring_n++;
                }
            }
        }
        if (in_n == 0 || ring_n == 0) return 0.0;
        gap += std::abs(in_sum / double(in_n) - ring_sum / double(ring_n));
    }
    return gap / (2.0 * double(img.channels));
}

std::vector<GroupRecord> generate_dataset(const DatasetSpec& spec, uint64_t seed) {
    if (spec.min_group < 2) throw std::invalid_argument("dataset: min_group must be >= 2");
    if (spec.max_group > 28) throw std::invalid_argument("dataset: max_group must be <= 28");
    if (spec.min_group > spec.max_group)
        throw std::invalid_argument("dataset: min_group > max_group");
    if (spec.min_side < 8) throw std::invalid_argument("dataset: min_side must be >= 8");
    if (spec.min_side > spec.max_side) throw std::invalid_argument("dataset: min_side > max_side");
    if (spec.groups < 0 || spec.stressor_pairs < 0)
        throw std::invalid_argument("dataset: negative counts");
    if (spec.groups + spec.stressor_pairs == 0)
        throw std::invalid_argument("dataset: empty spec");

    std::vector<GroupRecord> out;
    std::set<uint64_t> seen;
    int64_t gid = 0;
    for (int64_t g = 0; g < spec.groups; g++)
        out.push_back(make_group(gid++, derive_seed(seed, "group", uint64_t(g)), spec, seen));
    for (int64_t p = 0; p < spec.stressor_pairs; p++) {
        RandomSource prs(derive_seed(seed, "stress", uint64_t(p)));
        // the pair isolates position policy, so everything else must stay
        // clean: patterned background, fully visible subject in both arms.
        // rejected attempts discard their renders (trial set).
        for (int attempt = 0;; attempt++) {
            TopicSpec topic = draw_topic(prs);
            if (topic.background == 0) topic.background = 1 + topic.shape % 4;
            while (topic.bg_color_a == topic.color)
                topic.bg_color_a = int(prs.uniform_int(0, int64_t(color_names().size()) - 1));
            while (topic.bg_color_b == topic.color || topic.bg_color_b == topic.bg_color_a)
                topic.bg_color_b = int(prs.uniform_int(0, int64_t(color_names().size()) - 1));
            int64_t size = prs.uniform_int(spec.min_group, spec.max_group);
            int64_t side = draw_even(prs, spec.min_side, spec.max_side);
            std::set<uint64_t> trial = seen;
            GroupRecord al =
                make_stress_group(gid, derive_seed(seed, "stressA", uint64_t(p), uint64_t(attempt)),
                                  topic, size, side, true, trial);
            GroupRecord mis = make_stress_group(
                gid + 1, derive_seed(seed, "stressB", uint64_t(p), uint64_t(attempt)), topic, size,
                side, false, trial);
            if ((all_quality(al) && all_quality(mis)) || attempt >= 100) {
                seen = std::move(trial);
                out.push_back(std::move(al));
                out.push_back(std::move(mis));
                gid += 2;
                break;
            }
        }
    }
    return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); i++) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    return denom == 0.0 ? 0.0 : dot / denom;
}

std::vector<GroupRecord> filter_groups(const std::vector<GroupRecord>& manifest,
                                       const ProbeSet& probes, const FilterThresholds& th) {
    if (!probes.a_image || !probes.a_text || !probes.b_image)
        throw std::invalid_argument("filter_groups: probe set incomplete");
    std::vector<GroupRecord> out;
    for (const GroupRecord& g : manifest) {
        std::vector<std::vector<double>> ea, eb;
        for (const RefImage& im : g.images) {
            ea.push_back(probes.a_image(im.image));
            eb.push_back(probes.b_image(im.image));
        }
        GroupRecord kept = g;
        kept.images.clear();
        for (size_t i = 0; i < g.images.size(); i++) {
            // group consistency: mean pairwise similarity against the rest,
            // averaged over both probes so one noisy embedding cannot veto
            double sim = 0.0;
            for (size_t j = 0; j < g.images.size(); j++) {
                if (j == i) continue;
                sim += 0.5 * (cosine(ea[i], ea[j]) + cosine(eb[i], eb[j]));
            }
            sim /= double(g.images.size() - 1);
            double cap = cosine(ea[i], probes.a_text(g.images[i].caption));
            if (sim >= th.group_consistency && cap >= th.caption_match)
                kept.images.push_back(g.images[i]);
        }
        if (kept.images.size() >= 2) out.push_back(std::move(kept));
    }
    return out;
}

std::vector<GroupRecord> make_splits(std::vector<GroupRecord> manifest, int64_t held_out,
                                     int64_t held_in, uint64_t seed) {
    if (held_out < 0 || held_in < 0) throw std::invalid_argument("make_splits: negative counts");
    std::vector<size_t> regular;
    for (size_t i = 0; i < manifest.size(); i++) {
        const std::string& s = manifest[i].split;
        if (s != "stress-aligned" && s != "stress-misaligned") regular.push_back(i);
        manifest[i].split = s.rfind("stress-", 0) == 0 ? s : "train";
        for (RefImage& im : manifest[i].images) im.eval_target = false;
    }
    if (int64_t(regular.size()) < held_out + held_in)
        throw std::invalid_argument("make_splits: not enough groups for the requested splits");

    RandomSource rs(derive_seed(seed, "splits"));
    rs.shuffle(regular);
    for (int64_t k = 0; k < held_out; k++) manifest[regular[size_t(k)]].split = "held-out";
    for (int64_t k = 0; k < held_in; k++)
        manifest[regular[size_t(held_out + k)]].split = "held-in";

    for (GroupRecord& g : manifest) {
        if (g.split == "held-out" || g.split == "stress-aligned" ||
            g.split == "stress-misaligned") {
            // every member is its own evaluation case
            for (RefImage& im : g.images) im.eval_target = true;
        } else if (g.split == "held-in") {
            // one designated target, drawn among quality members when any
            std::vector<size_t> pool;
            for (size_t i = 0; i < g.images.size(); i++)
                if (g.images[i].quality) pool.push_back(i);
            if (pool.empty())
                for (size_t i = 0; i < g.images.size(); i++) pool.push_back(i);
            RandomSource grs(derive_seed(seed, "target", uint64_t(g.id)));
            g.images[pool[size_t(grs.uniform_int(0, int64_t(pool.size()) - 1))]].eval_target =
                true;
        }
    }
    return manifest;
}

std::vector<size_t> training_visible(const GroupRecord& g) {
    std::vector<size_t> idx;
    if (g.split == "train") {
        for (size_t i = 0; i < g.images.size(); i++) idx.push_back(i);
    } else if (g.split == "held-in") {
        for (size_t i = 0; i < g.images.size(); i++)
            if (!g.images[i].eval_target) idx.push_back(i);
    }
    return idx;
}

std::vector<size_t> training_targets(const GroupRecord& g) {
    std::vector<size_t> idx;
    for (size_t i : training_visible(g))
        if (g.images[i].quality) idx.push_back(i);
    return idx;
}

AuditReport audit_dataset(const std::vector<GroupRecord>& manifest) {
    AuditReport rep;
    std::map<uint64_t, int64_t> seen;
    std::set<uint64_t> reachable;
    for (const GroupRecord& g : manifest) {
        int64_t sz = int64_t(g.images.size());
        if (sz < 2 || sz > 28) rep.bad_group_sizes++;
        for (const RefImage& im : g.images) seen[image_hash(im.image)]++;
        for (size_t i : training_visible(g)) reachable.insert(image_hash(g.images[i].image));
    }
    for (const auto& [h, count] : seen)
        if (count > 1) rep.duplicate_hashes++;
    for (const GroupRecord& g : manifest) {
        bool eval_split = g.split == "held-out" || g.split == "held-in" ||
                          g.split.rfind("stress-", 0) == 0;
        int64_t targets = 0;
        for (const RefImage& im : g.images)
            if (im.eval_target) targets++;
        if (eval_split && targets == 0) rep.missing_targets++;
        if (g.split == "held-in" && targets != 1) rep.missing_targets++;
        if (g.split == "train" && targets != 0) rep.missing_targets++;
        if (g.split == "held-out" || g.split.rfind("stress-", 0) == 0)
            for (const RefImage& im : g.images)
                if (reachable.count(image_hash(im.image))) rep.leaked_hashes++;
        if (g.split == "held-in")
            for (const RefImage& im : g.images)
                if (im.eval_target && reachable.count(image_hash(im.image)))
                    rep.leaked_hashes++;
    }
    return rep;
}

void save_dataset(const std::string& dir, const std::vector<GroupRecord>& manifest) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream mf(fs::path(dir) / "manifest.jsonl", std::ios::trunc);
    if (!mf) throw std::runtime_error("dataset: cannot write manifest in " + dir);
    for (const GroupRecord& g : manifest) {
        for (size_t i = 0; i < g.images.size(); i++) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "g%04lld_i%02zu", (long long)g.id, i);
            std::string ppm = "images/" + std::string(stem) + ".ppm";
            std::string tns = "images/" + std::string(stem) + ".tns";
            const RefImage& im = g.images[i];
            write_ppm((fs::path(dir) / ppm).string(), im.image);
            write_image_tensor((fs::path(dir) / tns).string(), im.image);
            nlohmann::ordered_json j;
            j["group"] = g.id;
            j["index"] = i;
            j["path"] = ppm;
            j["tensor"] = tns;
            j["caption"] = im.caption;
            j["split"] = g.split;
            j["target"] = im.eval_target;
            j["quality"] = im.quality;
            j["bbox"] = {im.bbox.y0, im.bbox.x0, im.bbox.h, im.bbox.w};
            j["shape"] = shape_names()[size_t(g.topic.shape)];
            j["color"] = color_names()[size_t(g.topic.color)];
            j["background"] = background_names()[size_t(g.topic.background)];
            j["bg_color_a"] = color_names()[size_t(g.topic.bg_color_a)];
            j["bg_color_b"] = color_names()[size_t(g.topic.bg_color_b)];
            mf << j.dump() << '\n';
        }
    }
}

std::vector<GroupRecord> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.jsonl");
    if (!mf) throw std::runtime_error("dataset: cannot open manifest in " + dir);
    std::map<int64_t, GroupRecord> groups;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        int64_t gid = j.at("group").get<int64_t>();
        GroupRecord& g = groups[gid];
        g.id = gid;
        g.split = j.at("split").get<std::string>();
        g.topic.shape = name_index(shape_names(), j.at("shape").get<std::string>(), "shape");
        g.topic.color = name_index(color_names(), j.at("color").get<std::string>(), "color");
        g.topic.background =
            name_index(background_names(), j.at("background").get<std::string>(), "background");
        g.topic.bg_color_a =
            name_index(color_names(), j.at("bg_color_a").get<std::string>(), "color");
        g.topic.bg_color_b =
            name_index(color_names(), j.at("bg_color_b").get<std::string>(), "color");
        RefImage im;
        im.image = read_image_tensor((fs::path(dir) / j.at("tensor").get<std::string>()).string());
        im.caption = j.at("caption").get<std::string>();
        im.eval_target = j.at("target").get<bool>();
        im.quality = j.at("quality").get<bool>();
        auto bb = j.at("bbox");
        im.bbox = {bb.at(0).get<int64_t>(), bb.at(1).get<int64_t>(), bb.at(2).get<int64_t>(),
                   bb.at(3).get<int64_t>()};
        size_t idx = j.at("index").get<size_t>();
        if (g.images.size() <= idx) g.images.resize(idx + 1);
        g.images[idx] = std::move(im);
    }
    std::vector<GroupRecord> out;
    for (auto& [id, g] : groups) out.push_back(std::move(g));
    return out;
}

} // namespace refdiff
