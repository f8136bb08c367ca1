#include "lesa/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace lesa {

uint64_t fnv1a64(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open for writing: " + tmp);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw IoError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("rename failed: " + tmp + " -> " + path);
    }
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return out;
}

namespace {

template <typename T>
void append_pod(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(const std::string& bytes, size_t& pos, const std::string& path) {
    if (pos + sizeof(T) > bytes.size()) throw IoError("truncated file: " + path);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
}

constexpr uint32_t kTensorVersion = 1;
constexpr uint32_t kCheckpointVersion = 1;
constexpr uint32_t kDtypeF64 = 0;

}  // namespace

void write_tensor_file(const std::string& path, const Tensor& t) {
    std::string out;
    out.reserve(24 + t.data.size() * 8);
    out.append("LTEN", 4);
    append_pod<uint32_t>(out, kTensorVersion);
    append_pod<uint32_t>(out, kDtypeF64);
    append_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape) append_pod<uint64_t>(out, static_cast<uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
    atomic_write(path, out);
}

Tensor read_tensor_file(const std::string& path) {
    const std::string bytes = read_file(path);
    size_t pos = 0;
    if (bytes.size() < 4 || bytes.compare(0, 4, "LTEN") != 0) {
        throw IoError("not a tensor file (bad magic): " + path);
    }
    pos = 4;
    const auto version = read_pod<uint32_t>(bytes, pos, path);
    if (version != kTensorVersion) throw IoError("unsupported tensor file version in " + path);
    const auto dtype = read_pod<uint32_t>(bytes, pos, path);
    if (dtype != kDtypeF64) throw IoError("unsupported dtype in " + path);
    const auto rank = read_pod<uint32_t>(bytes, pos, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(read_pod<uint64_t>(bytes, pos, path));
    const int64_t n = numel_of(shape);
    if (bytes.size() - pos != static_cast<size_t>(n) * 8) {
        throw IoError("tensor file payload length mismatch in " + path);
    }
    Tensor t(shape);
    std::memcpy(t.data.data(), bytes.data() + pos, static_cast<size_t>(n) * 8);
    return t;
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

NamedTensor& Checkpoint::add(const std::string& name, const Shape& shape) {
    tensors.push_back({name, shape, std::vector<double>(static_cast<size_t>(numel_of(shape)))});
    return tensors.back();
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        nlohmann::json e;
        e["name"] = t.name;
        e["dtype"] = "f64";
        e["shape"] = t.shape;
        e["offset"] = offset;
        e["bytes"] = t.data.size() * 8;
        table.push_back(std::move(e));
        offset += t.data.size() * 8;
    }
    nlohmann::json header;
    header["arch"] = ckpt.arch_text;
    header["extra"] = ckpt.extra;
    header["tensors"] = std::move(table);
    const std::string hstr = header.dump();

    std::string out;
    out.reserve(16 + hstr.size() + offset + 8);
    out.append("LESA", 4);
    append_pod<uint32_t>(out, kCheckpointVersion);
    append_pod<uint64_t>(out, static_cast<uint64_t>(hstr.size()));
    out += hstr;
    const size_t payload_start = out.size();
    for (const auto& t : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
    }
    const uint64_t checksum = fnv1a64(out.data() + payload_start, out.size() - payload_start);
    append_pod<uint64_t>(out, checksum);
    atomic_write(path, out);
}

CheckpointHeader read_checkpoint_header(const std::string& path) {
    const std::string bytes = read_file(path);
    size_t pos = 0;
    if (bytes.size() < 4 || bytes.compare(0, 4, "LESA") != 0) {
        throw IoError("not a checkpoint (bad magic): " + path);
    }
    pos = 4;
    CheckpointHeader hdr;
    hdr.version = read_pod<uint32_t>(bytes, pos, path);
    if (hdr.version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(hdr.version) + " in " + path);
    }
    const auto hlen = read_pod<uint64_t>(bytes, pos, path);
    if (pos + hlen + 8 > bytes.size()) throw IoError("truncated checkpoint: " + path);
    nlohmann::json header = nlohmann::json::parse(bytes.substr(pos, hlen), nullptr, false);
    if (header.is_discarded()) throw IoError("corrupt checkpoint header JSON: " + path);
    pos += hlen;
    hdr.arch_text = header.at("arch").get<std::string>();
    hdr.extra = header.value("extra", nlohmann::json::object());
    for (const auto& e : header.at("tensors")) {
        CheckpointEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.dtype = e.at("dtype").get<std::string>();
        entry.shape = e.at("shape").get<Shape>();
        entry.offset = e.at("offset").get<uint64_t>();
        entry.bytes = e.at("bytes").get<uint64_t>();
        hdr.entries.push_back(std::move(entry));
    }
    hdr.payload_offset = pos;
    hdr.payload_bytes = bytes.size() - pos - 8;
    // validate the payload checksum up front: a corrupt file never yields data
    size_t cpos = bytes.size() - 8;
    const uint64_t stored = read_pod<uint64_t>(bytes, cpos, path);
    const uint64_t actual = fnv1a64(bytes.data() + hdr.payload_offset, hdr.payload_bytes);
    if (stored != actual) throw IoError("checkpoint checksum mismatch: " + path);
    return hdr;
}

std::vector<double> read_checkpoint_tensor(const std::string& path, const CheckpointHeader& hdr,
                                           const CheckpointEntry& entry) {
    const std::string bytes = read_file(path);
    if (entry.offset + entry.bytes > hdr.payload_bytes) {
        throw IoError("tensor '" + entry.name + "' out of payload bounds in " + path);
    }
    if (entry.bytes != static_cast<uint64_t>(numel_of(entry.shape)) * 8) {
        throw IoError("tensor '" + entry.name + "' byte count does not match shape in " + path);
    }
    std::vector<double> out(entry.bytes / 8);
    std::memcpy(out.data(), bytes.data() + hdr.payload_offset + entry.offset, entry.bytes);
    return out;
}

Checkpoint read_checkpoint(const std::string& path) {
    const CheckpointHeader hdr = read_checkpoint_header(path);
    const std::string bytes = read_file(path);
    Checkpoint ckpt;
    ckpt.arch_text = hdr.arch_text;
    ckpt.extra = hdr.extra;
    for (const auto& e : hdr.entries) {
        if (e.dtype != "f64") throw IoError("unsupported dtype for tensor '" + e.name + "' in " + path);
        if (e.offset + e.bytes > hdr.payload_bytes) {
            throw IoError("tensor '" + e.name + "' out of payload bounds in " + path);
        }
        NamedTensor t;
        t.name = e.name;
        t.shape = e.shape;
        t.data.resize(e.bytes / 8);
        std::memcpy(t.data.data(), bytes.data() + hdr.payload_offset + e.offset, e.bytes);
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

}  // namespace lesa
