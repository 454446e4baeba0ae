#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "avarc/types.hpp"

namespace avarc {

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> class_names;

    std::size_t size() const { return images.size(); }
    int n_classes() const { return static_cast<int>(class_names.size()); }
    /// First `n` examples (all when n exceeds the size).
    Dataset head(std::size_t n) const;
    /// Examples whose label is in `keep`, relabelled to their index in `keep`
    /// when `relabel` is set.
    Dataset filter(const std::vector<int>& keep, bool relabel) const;
};

/// Reads IDX image (magic 0x00000803) and label (0x00000801) files.
std::vector<Image> read_idx_images(const std::filesystem::path& path, std::size_t limit = 0);
std::vector<int> read_idx_labels(const std::filesystem::path& path, std::size_t limit = 0);

/// MNIST from `dir`, accepting both "train-images-idx3-ubyte" and
/// "train-images.idx3-ubyte" spellings. limit = 0 reads everything.
Dataset load_mnist(const std::filesystem::path& dir, bool train, std::size_t limit = 0);

/// root/<label>/<image>.png; class ids follow the sorted directory names.
Dataset load_image_folder(const std::filesystem::path& root, int channels, int height, int width);

/// `explicit_dir` if given, else $AVARC_DATA_DIR; DataError when neither exists.
std::filesystem::path resolve_data_dir(const std::optional<std::filesystem::path>& explicit_dir);

}  // namespace avarc
