#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "lesa/tensor.hpp"

namespace lesa {

uint64_t fnv1a64(const void* data, size_t n);

// write-temp-then-rename
void atomic_write(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

// ---- tensor file ("LTEN"): header {magic, version, dtype, rank, dims},
//      row-major little-endian f64 payload ----
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// ---- checkpoint ("LESA"): magic, version, JSON header (architecture text +
//      tensor table with byte offsets), raw f64 payload, FNV-1a64 footer ----
struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct Checkpoint {
    std::string arch_text;
    nlohmann::json extra;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
    NamedTensor& add(const std::string& name, const Shape& shape);
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);  // validates the checksum

// Header-only access: enough to enumerate and slice every tensor without the
// architecture code.
struct CheckpointEntry {
    std::string name;
    std::string dtype;
    Shape shape;
    uint64_t offset = 0;  // relative to payload start
    uint64_t bytes = 0;
};

struct CheckpointHeader {
    uint32_t version = 0;
    std::string arch_text;
    nlohmann::json extra;
    std::vector<CheckpointEntry> entries;
    uint64_t payload_offset = 0;
    uint64_t payload_bytes = 0;
};

CheckpointHeader read_checkpoint_header(const std::string& path);
std::vector<double> read_checkpoint_tensor(const std::string& path, const CheckpointHeader& hdr,
                                           const CheckpointEntry& entry);

}  // namespace lesa
