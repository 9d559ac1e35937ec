#include "unidiff/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "binary_io.hpp"
#include "unidiff/errors.hpp"

namespace unidiff {

namespace detail {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(size);
    if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        throw std::runtime_error("cannot read " + path.string());
    }
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

const std::string& Checkpoint::meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw std::runtime_error("checkpoint metadata lacks key '" + key + "'");
    return it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    detail::ByteWriter w;
    w.put_bytes(kCheckpointMagic, 4);
    w.put<std::uint16_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
        w.put_string32(k);
        w.put_string32(v);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        std::size_t count = 1;
        for (int d : t.shape) count *= static_cast<std::size_t>(d);
        if (count != t.values.size()) throw std::invalid_argument("tensor '" + t.name + "' size does not match its shape");
        w.put_string16(t.name);
        w.put<std::uint8_t>(0);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
        for (int d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        const std::uint64_t nbytes = t.values.size() * sizeof(float);
        w.put<std::uint64_t>(offset);
        w.put<std::uint64_t>(nbytes);
        offset += nbytes;
    }
    for (const auto& t : ckpt.tensors) w.put_bytes(t.values.data(), t.values.size() * sizeof(float));
    return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes);
    char magic[4];
    r.get_bytes(magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)", 0);
    const auto version = r.get<std::uint16_t>("version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);

    Checkpoint ckpt;
    const auto nmeta = r.get<std::uint32_t>("metadata count");
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = r.get_string32("metadata key");
        std::string v = r.get_string32("metadata value");
        ckpt.metadata.emplace(std::move(k), std::move(v));
    }
    struct Entry {
        std::uint64_t offset, nbytes;
        std::size_t at;
    };
    const auto ntensors = r.get<std::uint32_t>("tensor count");
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        CheckpointTensor t;
        const std::size_t at = r.pos();
        t.name = r.get_string16("tensor name");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype != 0) throw FormatError("unsupported dtype code " + std::to_string(dtype), r.pos() - 1);
        const auto rank = r.get<std::uint8_t>("rank");
        std::size_t count = 1;
        for (int d = 0; d < rank; ++d) {
            const auto dim = r.get<std::uint32_t>("dimension");
            t.shape.push_back(static_cast<int>(dim));
            count *= dim;
        }
        Entry e{r.get<std::uint64_t>("payload offset"), r.get<std::uint64_t>("payload size"), at};
        if (e.nbytes != count * sizeof(float)) throw FormatError("tensor '" + t.name + "' payload size disagrees with shape", at);
        entries.push_back(e);
        ckpt.tensors.push_back(std::move(t));
    }
    const std::size_t payload = r.pos();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Entry& e = entries[i];
        if (e.offset > bytes.size() - payload || e.nbytes > bytes.size() - payload - e.offset) {
            throw FormatError("tensor '" + ckpt.tensors[i].name + "' payload truncated", std::min(bytes.size(), payload + e.offset));
        }
        auto& vals = ckpt.tensors[i].values;
        vals.resize(e.nbytes / sizeof(float));
        std::memcpy(vals.data(), bytes.data() + payload + e.offset, e.nbytes);
    }
    return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace unidiff
