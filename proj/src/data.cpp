#include "avarc/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "avarc/error.hpp"
#include "avarc/png_io.hpp"

namespace avarc {

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated IDX header in " + path.string());
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::ifstream open_idx(const std::filesystem::path& path, std::uint32_t magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    const auto got = read_be32(in, path);
    if (got != magic) throw FormatError(path.string() + " is not an IDX file of the expected kind");
    return in;
}

std::filesystem::path first_existing(const std::filesystem::path& dir, std::initializer_list<const char*> names) {
    for (const char* n : names)
        if (std::filesystem::exists(dir / n)) return dir / n;
    throw DataError("none of the expected MNIST files found in " + dir.string() + " (e.g. " + *names.begin() + ")");
}

}  // namespace

Dataset Dataset::head(std::size_t n) const {
    Dataset d;
    d.class_names = class_names;
    n = std::min(n, size());
    d.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
}

Dataset Dataset::filter(const std::vector<int>& keep, bool relabel) const {
    Dataset d;
    if (relabel)
        for (int k : keep) d.class_names.push_back(k >= 0 && k < n_classes() ? class_names[static_cast<std::size_t>(k)] : std::to_string(k));
    else
        d.class_names = class_names;
    for (std::size_t i = 0; i < size(); ++i) {
        const auto it = std::find(keep.begin(), keep.end(), labels[i]);
        if (it == keep.end()) continue;
        d.images.push_back(images[i]);
        d.labels.push_back(relabel ? static_cast<int>(it - keep.begin()) : labels[i]);
    }
    return d;
}

std::vector<Image> read_idx_images(const std::filesystem::path& path, std::size_t limit) {
    auto in = open_idx(path, 0x00000803);
    std::size_t n = read_be32(in, path);
    const int rows = static_cast<int>(read_be32(in, path));
    const int cols = static_cast<int>(read_be32(in, path));
    if (limit > 0) n = std::min(n, limit);
    std::vector<Image> out;
    out.reserve(n);
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::size_t i = 0; i < n; ++i) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw DataError("truncated IDX image data in " + path.string());
        Image im(1, rows, cols);
        for (std::size_t p = 0; p < buf.size(); ++p) im.pixels[p] = buf[p] / 255.0;
        out.push_back(std::move(im));
    }
    return out;
}

std::vector<int> read_idx_labels(const std::filesystem::path& path, std::size_t limit) {
    auto in = open_idx(path, 0x00000801);
    std::size_t n = read_be32(in, path);
    if (limit > 0) n = std::min(n, limit);
    std::vector<unsigned char> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
        throw DataError("truncated IDX label data in " + path.string());
    return std::vector<int>(buf.begin(), buf.end());
}

Dataset load_mnist(const std::filesystem::path& dir, bool train, std::size_t limit) {
    const auto images = train ? first_existing(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"})
                              : first_existing(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
    const auto labels = train ? first_existing(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"})
                              : first_existing(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
    Dataset d;
    d.images = read_idx_images(images, limit);
    d.labels = read_idx_labels(labels, limit);
    if (d.images.size() != d.labels.size()) throw DataError("MNIST image and label counts differ");
    for (int c = 0; c < 10; ++c) d.class_names.push_back(std::to_string(c));
    return d;
}

Dataset load_image_folder(const std::filesystem::path& root, int channels, int height, int width) {
    if (!std::filesystem::is_directory(root)) throw DataError(root.string() + " is not a directory");
    std::vector<std::filesystem::path> class_dirs;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    Dataset d;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        d.class_names.push_back(class_dirs[c].filename().string());
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(class_dirs[c]))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            auto im = read_png(f, channels);
            if (im.height != height || im.width != width)
                throw ShapeError(f.string() + " is " + std::to_string(im.height) + "x" + std::to_string(im.width) +
                                 ", expected " + std::to_string(height) + "x" + std::to_string(width));
            d.images.push_back(std::move(im));
            d.labels.push_back(static_cast<int>(c));
        }
    }
    if (d.images.empty()) throw DataError("no PNG images under " + root.string());
    return d;
}

std::filesystem::path resolve_data_dir(const std::optional<std::filesystem::path>& explicit_dir) {
    if (explicit_dir && !explicit_dir->empty()) return *explicit_dir;
    if (const char* env = std::getenv("AVARC_DATA_DIR"); env && *env) return env;
    throw DataError("no dataset directory given and AVARC_DATA_DIR is unset");
}

}  // namespace avarc
