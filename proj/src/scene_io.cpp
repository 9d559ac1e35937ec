#include <charconv>
#include <fstream>
#include <stdexcept>
#include <string>

#include "binary_io.hpp"
#include "json.hpp"
#include "unidiff/dataio.hpp"
#include "unidiff/errors.hpp"

namespace unidiff {

std::vector<std::uint8_t> encode_raster(const RasterStack& r) {
    r.validate();
    detail::ByteWriter w;
    w.put_bytes(kRasterMagic, 4);
    w.put<std::uint16_t>(kRasterVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.width));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.channels));
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(r.wavelengths.empty() ? 0 : 1);
    if (!r.wavelengths.empty()) w.put_bytes(r.wavelengths.data(), r.wavelengths.size() * sizeof(double));
    w.put_bytes(r.values.data(), r.values.size() * sizeof(float));
    return std::move(w.bytes());
}

RasterStack decode_raster(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader rd(bytes);
    char magic[4];
    rd.get_bytes(magic, 4, "raster magic");
    if (std::string(magic, 4) != std::string(kRasterMagic, 4)) throw FormatError("not a URDS raster (bad magic)", 0);
    const auto version = rd.get<std::uint16_t>("raster version");
    if (version != kRasterVersion) throw FormatError("unsupported raster version " + std::to_string(version), 4);
    const auto h = rd.get<std::uint32_t>("raster height");
    const auto w = rd.get<std::uint32_t>("raster width");
    const auto c = rd.get<std::uint32_t>("raster channels");
    if (h == 0 || w == 0 || c == 0 || h > (1u << 20) || w > (1u << 20) || c > (1u << 16)) {
        throw FormatError("implausible raster dimensions", 6);
    }
    const std::size_t dtype_pos = rd.pos();
    const auto dtype = rd.get<std::uint8_t>("raster dtype");
    if (dtype != 0) throw FormatError("unsupported raster dtype code " + std::to_string(dtype), dtype_pos);
    const std::size_t flag_pos = rd.pos();
    const auto has_wl = rd.get<std::uint8_t>("wavelength flag");
    if (has_wl > 1) throw FormatError("bad wavelength flag", flag_pos);
    RasterStack r(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    if (has_wl) {
        r.wavelengths.resize(c);
        rd.get_bytes(r.wavelengths.data(), c * sizeof(double), "wavelength block");
    }
    rd.get_bytes(r.values.data(), r.values.size() * sizeof(float), "raster payload");
    if (rd.remaining() != 0) throw FormatError("trailing bytes after raster payload", rd.pos());
    return r;
}

void write_raster(const RasterStack& r, const std::filesystem::path& path) { detail::write_file_bytes(path, encode_raster(r)); }

RasterStack read_raster(const std::filesystem::path& path) {
    try {
        return decode_raster(detail::read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what(), e.offset());
    }
}

void write_labels(const SparseLabelSet& labels, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "row,col,class_id\n";
    for (const auto& e : labels.entries) out << e.row << ',' << e.col << ',' << e.class_id << '\n';
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

bool parse_int(std::string_view s, int& v) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (s.empty()) return false;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace

SparseLabelSet read_labels(const std::filesystem::path& path, int num_classes, const std::string& split, int height,
                           int width) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open label file " + path.string());
    SparseLabelSet set;
    set.num_classes = num_classes;
    set.split = split;
    std::vector<char> seen(static_cast<std::size_t>(height) * width, 0);
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& why) {
        throw std::invalid_argument(path.string() + " line " + std::to_string(line_no) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "row,col,class_id") fail("expected header 'row,col,class_id'");
            continue;
        }
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) fail("expected three comma-separated fields");
        LabelEntry e;
        const std::string_view sv(line);
        if (!parse_int(sv.substr(0, c1), e.row) || !parse_int(sv.substr(c1 + 1, c2 - c1 - 1), e.col) ||
            !parse_int(sv.substr(c2 + 1), e.class_id)) {
            fail("fields must be integers");
        }
        if (e.row < 0 || e.row >= height || e.col < 0 || e.col >= width) {
            fail("coordinate (" + std::to_string(e.row) + "," + std::to_string(e.col) + ") outside " + std::to_string(height) + "x" +
                 std::to_string(width) + " raster");
        }
        if (e.class_id < 1 || e.class_id > num_classes) {
            fail("class id " + std::to_string(e.class_id) + " outside [1, " + std::to_string(num_classes) + "]");
        }
        char& s = seen[static_cast<std::size_t>(e.row) * width + e.col];
        if (s) fail("duplicate coordinate (" + std::to_string(e.row) + "," + std::to_string(e.col) + ")");
        s = 1;
        set.entries.push_back(e);
    }
    if (line_no == 0) throw std::invalid_argument(path.string() + ": empty label file (missing header)");
    return set;
}

void save_scene(const SceneBundle& scene, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_raster(scene.hsi, dir / "hsi.urds");
    write_raster(scene.sar, dir / "sar.urds");
    if (scene.prepared()) {
        write_raster(scene.prgb, dir / "prgb.urds");
        write_raster(scene.pca3, dir / "pca3.urds");
        write_raster(scene.sar3, dir / "sar3.urds");
    }
    write_labels(scene.train, dir / "train_labels.csv");
    write_labels(scene.test, dir / "test_labels.csv");
    nlohmann::ordered_json j;
    j["format"] = "unidiff-scene";
    j["num_classes"] = scene.num_classes();
    j["class_names"] = scene.class_names;
    j["metadata"] = scene.metadata;
    std::ofstream out(dir / "scene.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / "scene.json").string());
    out << j.dump(2) << '\n';
}

SceneBundle load_scene(const std::filesystem::path& dir) {
    const auto meta_path = dir / "scene.json";
    std::ifstream in(meta_path);
    if (!in) throw std::runtime_error("cannot open " + meta_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(meta_path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "unidiff-scene") throw std::runtime_error(meta_path.string() + " is not a scene description");
    SceneBundle s;
    const int k = j.at("num_classes").get<int>();
    s.class_names = j.value("class_names", std::vector<std::string>{});
    s.metadata = j.value("metadata", std::map<std::string, std::string>{});
    if (static_cast<int>(s.class_names.size()) != k) throw std::runtime_error(meta_path.string() + ": class name count differs from num_classes");
    s.hsi = read_raster(dir / "hsi.urds");
    s.sar = read_raster(dir / "sar.urds");
    if (s.sar.height != s.hsi.height || s.sar.width != s.hsi.width) throw std::runtime_error("HSI and SAR rasters differ in size");
    if (std::filesystem::exists(dir / "prgb.urds")) {
        s.prgb = read_raster(dir / "prgb.urds");
        s.pca3 = read_raster(dir / "pca3.urds");
        s.sar3 = read_raster(dir / "sar3.urds");
        for (const RasterStack* r : {&s.prgb, &s.pca3, &s.sar3}) {
            if (r->height != s.hsi.height || r->width != s.hsi.width || r->channels != 3) {
                throw std::runtime_error("derived representation does not match the scene size");
            }
        }
    }
    s.train = read_labels(dir / "train_labels.csv", k, "train", s.hsi.height, s.hsi.width);
    s.test = read_labels(dir / "test_labels.csv", k, "test", s.hsi.height, s.hsi.width);
    return s;
}

}  // namespace unidiff
