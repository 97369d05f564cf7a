#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace refdiff {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// flat key=value settings with dotted sections (train.lr=1e-3). sources are
// applied in precedence order: defaults, then the config file, then explicit
// overrides; within one source the last assignment wins.
class RunConfig {
  public:
    void set_default(const std::string& key, const std::string& value);
    void set(const std::string& key, const std::string& value); // validates the key shape
    void load_file(const std::string& path);                    // '#' comments, blank lines ok
    void apply_override(const std::string& assignment);         // one "key=value" string

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::string str(const std::string& key) const;
    int64_t integer(const std::string& key) const;
    double real(const std::string& key) const;
    bool flag(const std::string& key) const; // true/false/1/0

    // typo guard: every stored key must appear in `known`
    void require_known(const std::set<std::string>& known) const;

    // the fully resolved settings, sorted, one per line; this is what makes a
    // run reconstructible from its output directory
    void echo(const std::string& path) const;

    const std::map<std::string, std::string>& items() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

} // namespace refdiff
