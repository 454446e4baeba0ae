#pragma once

// Binary checkpoint container:
//   8-byte magic | uint64 LE metadata length | UTF-8 JSON metadata |
//   little-endian float32 blobs, in the order of metadata["tensors"].

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "avarc/nn/layers.hpp"
#include "json.hpp"

namespace avarc {

inline constexpr std::string_view kTokenizerMagic = "AVARCTK1";
inline constexpr std::string_view kModelMagic = "AVARCNS1";
inline constexpr std::string_view kBaselineMagic = "AVARCBL1";
inline constexpr int kCheckpointVersion = 1;

struct StoredTensor {
    std::string name;
    nn::Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    nlohmann::json metadata;
    std::vector<StoredTensor> tensors;
};

/// Writes `params` after `metadata`; adds "format_version" and the tensor
/// table to the metadata.
void write_checkpoint(const std::filesystem::path& path, std::string_view magic, nlohmann::json metadata,
                      const nn::ParamRefs& params);

/// Throws FormatError on magic/version mismatch or truncation.
Checkpoint read_checkpoint(const std::filesystem::path& path, std::string_view magic);

/// Copies stored values into `params` by name; every parameter must be present
/// with an identical shape.
void load_params(const Checkpoint& ckpt, const nn::ParamRefs& params);

/// Rounds every parameter to float32 so in-memory values equal what a
/// checkpoint round trip yields.
void round_params_to_float(const nn::ParamRefs& params);

}  // namespace avarc
