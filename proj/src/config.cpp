#include "refdiff/config.hpp"

#include <cctype>
#include <fstream>

namespace refdiff {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool valid_key(const std::string& key) {
    if (key.empty() || key.front() == '.' || key.back() == '.') return false;
    for (char c : key)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
            return false;
    return true;
}

} // namespace

void RunConfig::set_default(const std::string& key, const std::string& value) {
    set(key, value);
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!valid_key(key)) throw ConfigError("config: bad key '" + key + "'");
    values_[key] = value;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path);
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        lineno++;
        std::string body = trim(line);
        if (body.empty() || body.front() == '#') continue;
        size_t eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                              " is not key=value: " + body);
        std::string key = trim(body.substr(0, eq));
        if (!valid_key(key))
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) + " bad key '" +
                              key + "'");
        values_[key] = trim(body.substr(eq + 1));
    }
}

void RunConfig::apply_override(const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: override is not key=value: " + assignment);
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string RunConfig::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: missing key " + key);
    return it->second;
}

int64_t RunConfig::integer(const std::string& key) const {
    std::string v = str(key);
    try {
        size_t used = 0;
        int64_t out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + "=" + v + " is not an integer");
    }
}

double RunConfig::real(const std::string& key) const {
    std::string v = str(key);
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + "=" + v + " is not a number");
    }
}

bool RunConfig::flag(const std::string& key) const {
    std::string v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + "=" + v + " is not a boolean (true/false/1/0)");
}

void RunConfig::require_known(const std::set<std::string>& known) const {
    for (const auto& [key, value] : values_)
        if (!known.count(key)) throw ConfigError("config: unknown key " + key);
}

void RunConfig::echo(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ConfigError("config: cannot write " + path);
    for (const auto& [key, value] : values_) os << key << "=" << value << "\n";
}

} // namespace refdiff
