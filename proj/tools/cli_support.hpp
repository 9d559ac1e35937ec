#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "unidiff/config.hpp"

namespace unidiff::cli {

namespace fs = std::filesystem;

// Bad invocation or missing input: exit code 1.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Files and directories a command creates. Unless commit() runs, the
// destructor removes them again so a failed command leaves nothing behind.
class Outputs {
public:
    Outputs() = default;
    Outputs(const Outputs&) = delete;
    Outputs& operator=(const Outputs&) = delete;
    ~Outputs();

    fs::path file(const fs::path& p);  // registers p and creates its parent
    fs::path dir(const fs::path& p);   // creates p (and parents) if missing
    void commit() { committed_ = true; }
    const std::vector<fs::path>& files() const { return files_; }

private:
    void make_dirs(const fs::path& p);

    std::vector<fs::path> files_;
    std::vector<fs::path> created_dirs_;
    bool committed_ = false;
};

struct Context {
    std::string command;
    std::vector<std::string> argv;
    RunConfig config;
    fs::path root;
    bool quiet = false;

    void log(const std::string& msg) const;

    fs::path scene_dir() const { return root / "scene"; }
    fs::path ckpt_dir() const { return root / "ckpt"; }
    fs::path features_dir() const { return root / "features"; }
    fs::path reports_dir() const { return root / "reports"; }
    fs::path plots_dir() const { return root / "plots"; }
};

// Default output root: $UNIDIFF_ROOT when set, else the working directory.
fs::path default_root();

void require_file(const fs::path& p, const std::string& what);
void require_dir(const fs::path& p, const std::string& what);
// Refuses to write over any of the command's inputs.
void check_not_input(const fs::path& out, const std::vector<fs::path>& inputs);

void write_text(const fs::path& p, const std::string& text);

// Records the command, resolved config, inputs and outputs under
// root/manifest.json, replacing an earlier entry for the same command.
void update_manifest(const Context& ctx, const std::map<std::string, std::string>& inputs,
                     const std::vector<fs::path>& outputs);

}  // namespace unidiff::cli
