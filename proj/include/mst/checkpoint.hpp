#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mst/model.hpp"

namespace mst {

// Binary container: "MBST" magic, u32 version, u64 header length, JSON config
// header, u32 tensor count, per-tensor index entries (u16 name length + name,
// u8 dtype 0=f32/1=f64, u8 rank, rank x u64 dims, u64 blob offset), then the
// contiguous row-major blob. Little-endian throughout.

inline constexpr char kCheckpointMagic[4] = {'M', 'B', 'S', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct RawTensorEntry {
    std::string name;
    uint8_t dtype = 1;  // 0 = f32, 1 = f64
    Shape shape;
    uint64_t offset = 0;

    int64_t numel() const { return shape_numel(shape); }
    size_t elem_size() const { return dtype == 0 ? 4 : 8; }
};

struct RawCheckpoint {
    uint32_t version = 0;
    std::string config_json;
    std::vector<RawTensorEntry> entries;
    std::vector<unsigned char> blob;

    // Values of entry i, widened to f64 when stored as f32.
    std::vector<double> values(size_t i) const;
};

RawCheckpoint read_checkpoint_file(const std::string& path);
void write_checkpoint_file(const std::string& path, const std::string& config_json, const NamedParams& tensors);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace mst
