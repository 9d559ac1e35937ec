#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "unidiff/adaptation.hpp"
#include "unidiff/backbone.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/dataio.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

// Every tunable, addressed as "section.key". Files use INI sections; the
// command line uses the same dotted names as long flags.
class RunConfig {
public:
    enum class Kind { Int, Real, Text, Bool, IntList };
    struct Key {
        std::string name;
        Kind kind;
        std::string default_value;
        std::string help;
    };
    static const std::vector<Key>& keys();
    static const Key* find_key(const std::string& name);

    RunConfig();

    // Throws ConfigError on unknown sections or keys, or unparsable values.
    void load_file(const std::filesystem::path& path);
    void set(const std::string& name, const std::string& value);

    const std::string& raw(const std::string& name) const;
    bool is_default(const std::string& name) const;
    long long get_int(const std::string& name) const;
    double get_real(const std::string& name) const;
    bool get_bool(const std::string& name) const;
    std::vector<int> get_ints(const std::string& name) const;

    // Resolved configuration as INI text, every key included.
    std::string to_ini() const;
    std::map<std::string, std::string> values() const { return values_; }

    NoiseSchedule schedule() const;
    DenoiserConfig model_config() const;
    AdaptationConfig adaptation() const;
    // A negative layer resolves to the outermost tap of the given model.
    FeatureSpec features(int tap_count) const;
    ClassifierConfig head() const;
    SynthOptions synth() const;
    PrepareOptions prepare() const;

    // Builds every module config so errors surface before any compute.
    void validate() const;

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> touched_;
};

}  // namespace unidiff
