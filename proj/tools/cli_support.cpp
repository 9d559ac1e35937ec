#include "cli_support.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace unidiff::cli {

Outputs::~Outputs() {
    if (committed_) return;
    std::error_code ec;
    for (auto it = files_.rbegin(); it != files_.rend(); ++it) fs::remove(*it, ec);
    for (auto it = created_dirs_.rbegin(); it != created_dirs_.rend(); ++it) {
        if (fs::is_directory(*it, ec) && fs::is_empty(*it, ec)) fs::remove(*it, ec);
    }
}

void Outputs::make_dirs(const fs::path& p) {
    if (p.empty()) return;
    std::vector<fs::path> missing;
    for (fs::path q = p; !q.empty() && !fs::exists(q); q = q.parent_path()) {
        missing.push_back(q);
        if (q == q.parent_path()) break;
    }
    fs::create_directories(p);
    created_dirs_.insert(created_dirs_.end(), missing.rbegin(), missing.rend());
}

fs::path Outputs::file(const fs::path& p) {
    make_dirs(p.parent_path());
    files_.push_back(p);
    return p;
}

fs::path Outputs::dir(const fs::path& p) {
    make_dirs(p);
    return p;
}

void Context::log(const std::string& msg) const {
    if (!quiet) std::cerr << "[" << command << "] " << msg << std::endl;
}

fs::path default_root() {
    if (const char* env = std::getenv("UNIDIFF_ROOT"); env && *env) return env;
    return fs::current_path();
}

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) throw UsageError("missing " + what);
    if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void require_dir(const fs::path& p, const std::string& what) {
    if (p.empty()) throw UsageError("missing " + what);
    if (!fs::is_directory(p)) throw UsageError(what + " not found: " + p.string());
}

void check_not_input(const fs::path& out, const std::vector<fs::path>& inputs) {
    std::error_code ec;
    for (const auto& in : inputs) {
        if (in.empty() || !fs::exists(in) || !fs::exists(out)) continue;
        if (fs::equivalent(out, in, ec)) throw UsageError("output " + out.string() + " would overwrite an input");
    }
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + p.string());
}

void update_manifest(const Context& ctx, const std::map<std::string, std::string>& inputs,
                     const std::vector<fs::path>& outputs) {
    using nlohmann::ordered_json;
    const fs::path path = ctx.root / "manifest.json";
    ordered_json doc;
    if (fs::exists(path)) {
        std::ifstream in(path);
        try {
            doc = ordered_json::parse(in);
        } catch (const std::exception&) {
            doc = ordered_json();  // unreadable manifest: start over
        }
    }
    if (!doc.is_object() || doc.value("format", "") != "unidiff-manifest") {
        doc = ordered_json{{"format", "unidiff-manifest"}, {"commands", ordered_json::object()}};
    }
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    ordered_json entry;
    entry["argv"] = ctx.argv;
    entry["finished"] = stamp;
    entry["inputs"] = inputs;
    std::vector<std::string> outs;
    for (const auto& o : outputs) outs.push_back(fs::relative(o, ctx.root).lexically_normal().string());
    entry["outputs"] = outs;
    entry["config"] = ctx.config.values();
    doc["commands"][ctx.command] = std::move(entry);
    fs::create_directories(ctx.root);
    const fs::path tmp = path.string() + ".tmp";
    write_text(tmp, doc.dump(2) + "\n");
    fs::rename(tmp, path);
}

}  // namespace unidiff::cli
