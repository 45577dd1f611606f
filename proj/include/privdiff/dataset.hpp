#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "privdiff/errors.hpp"
#include "privdiff/rng.hpp"
#include "privdiff/tensor.hpp"

namespace privdiff {

constexpr uint16_t kUnlabeled = 0xFFFF;

// On-disk image archive. Layout (little-endian):
//   u32 magic 'PDDA', u32 version, u32 count, u32 height, u32 width,
//   u32 channels, u32 class_count,
//   count*height*width*channels bytes of row-major 8-bit pixels,
//   count u16 class ids (0xFFFF = unlabeled).
struct DatasetArchive {
    static constexpr uint32_t kMagic = 0x41444450;  // "PDDA"
    static constexpr uint32_t kVersion = 1;

    int n = 0, height = 0, width = 0, channels = 0, class_count = 0;
    std::vector<uint8_t> pixels;
    std::vector<uint16_t> labels;

    void validate() const {
        if (n < 0 || height < 1 || width < 1 || channels < 1)
            throw FormatError("archive: bad header extents");
        if (pixels.size() != static_cast<size_t>(n) * height * width * channels)
            throw FormatError("archive: payload length mismatch");
        if (labels.size() != static_cast<size_t>(n))
            throw FormatError("archive: label record mismatch");
        for (uint16_t l : labels)
            if (l != kUnlabeled && class_count > 0 && l >= class_count)
                throw FormatError("archive: class id out of range");
    }

    bool labeled() const {
        return !labels.empty() && labels[0] != kUnlabeled;
    }

    // Pixels mapped to [-1, 1].
    Tensor to_tensor() const {
        Tensor t({n, channels, height, width});
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<double>(pixels[static_cast<size_t>(i)]) / 127.5 - 1.0;
        return t;
    }

    std::vector<int> labels_int() const {
        std::vector<int> out;
        out.reserve(labels.size());
        for (uint16_t l : labels) out.push_back(l == kUnlabeled ? -1 : static_cast<int>(l));
        return out;
    }

    static DatasetArchive from_tensor(const Tensor& imgs, const std::vector<int>& labels,
                                      int class_count) {
        if (imgs.ndim() != 4) throw ShapeError("archive: images must be [n,ch,h,w]");
        DatasetArchive a;
        a.n = imgs.dim(0);
        a.channels = imgs.dim(1);
        a.height = imgs.dim(2);
        a.width = imgs.dim(3);
        a.class_count = class_count;
        a.pixels.resize(static_cast<size_t>(imgs.numel()));
        for (int64_t i = 0; i < imgs.numel(); ++i) {
            double v = std::clamp((imgs[i] + 1.0) * 127.5, 0.0, 255.0);
            a.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(v));
        }
        if (labels.empty()) {
            a.labels.assign(static_cast<size_t>(a.n), kUnlabeled);
        } else {
            if (static_cast<int>(labels.size()) != a.n)
                throw DataError("archive: one label per image required");
            for (int l : labels)
                a.labels.push_back(l < 0 ? kUnlabeled : static_cast<uint16_t>(l));
        }
        a.validate();
        return a;
    }

    void save(const std::string& path) const {
        validate();
        std::string tmp = path + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            if (!os) throw DataError("archive: cannot open " + tmp);
            auto put_u32 = [&](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
            put_u32(kMagic);
            put_u32(kVersion);
            put_u32(static_cast<uint32_t>(n));
            put_u32(static_cast<uint32_t>(height));
            put_u32(static_cast<uint32_t>(width));
            put_u32(static_cast<uint32_t>(channels));
            put_u32(static_cast<uint32_t>(class_count));
            os.write(reinterpret_cast<const char*>(pixels.data()),
                     static_cast<std::streamsize>(pixels.size()));
            os.write(reinterpret_cast<const char*>(labels.data()),
                     static_cast<std::streamsize>(labels.size() * 2));
            if (!os) throw DataError("archive: write failed for " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    static DatasetArchive load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("archive: cannot open " + path);
        auto get_u32 = [&]() {
            uint32_t v = 0;
            is.read(reinterpret_cast<char*>(&v), 4);
            if (!is) throw FormatError("archive: truncated header in " + path);
            return v;
        };
        if (get_u32() != kMagic) throw FormatError("archive: bad magic in " + path);
        if (get_u32() != kVersion) throw FormatError("archive: unsupported version in " + path);
        DatasetArchive a;
        a.n = static_cast<int>(get_u32());
        a.height = static_cast<int>(get_u32());
        a.width = static_cast<int>(get_u32());
        a.channels = static_cast<int>(get_u32());
        a.class_count = static_cast<int>(get_u32());
        a.pixels.resize(static_cast<size_t>(a.n) * a.height * a.width * a.channels);
        is.read(reinterpret_cast<char*>(a.pixels.data()),
                static_cast<std::streamsize>(a.pixels.size()));
        a.labels.resize(static_cast<size_t>(a.n));
        is.read(reinterpret_cast<char*>(a.labels.data()),
                static_cast<std::streamsize>(a.labels.size() * 2));
        if (!is) throw FormatError("archive: truncated payload in " + path);
        a.validate();
        return a;
    }
};

// ---------------------------------------------------------------------------
// Ingestion: PGM directory and IDX pairs
// ---------------------------------------------------------------------------

namespace detail {

struct PgmImage {
    int width = 0, height = 0;
    std::vector<uint8_t> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("pgm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw FormatError("pgm: unsupported format in " + path);
    auto next_token = [&]() {
        std::string tok;
        while (is >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(is, rest);
                continue;
            }
            return tok;
        }
        throw FormatError("pgm: truncated header in " + path);
    };
    PgmImage img;
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
    int maxval = std::stoi(next_token());
    if (maxval != 255) throw FormatError("pgm: only 8-bit supported in " + path);
    is.get();  // single whitespace after maxval
    img.pixels.resize(static_cast<size_t>(img.width) * img.height);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw FormatError("pgm: truncated pixels in " + path);
    return img;
}

inline uint32_t read_be32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("idx: truncated header in " + path);
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | b[3];
}

}  // namespace detail

// Deterministic ingest of a directory of 8-bit PGM files (lexicographic by
// filename). All images must share one size.
inline DatasetArchive ingest_directory(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm")
            files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("ingest: no .pgm files in " + dir);

    DatasetArchive a;
    a.channels = 1;
    a.class_count = 0;
    for (const std::string& f : files) {
        detail::PgmImage img = detail::read_pgm(f);
        if (a.n == 0) {
            a.height = img.height;
            a.width = img.width;
        } else if (img.height != a.height || img.width != a.width) {
            throw DataError("ingest: mixed image sizes (" + f + ")");
        }
        a.pixels.insert(a.pixels.end(), img.pixels.begin(), img.pixels.end());
        a.labels.push_back(kUnlabeled);
        ++a.n;
    }
    a.validate();
    return a;
}

// MNIST-format IDX import; the labels file is optional.
inline DatasetArchive ingest_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream is(images_path, std::ios::binary);
    if (!is) throw DataError("idx: cannot open " + images_path);
    if (detail::read_be32(is, images_path) != 0x00000803)
        throw FormatError("idx: bad image magic in " + images_path);
    DatasetArchive a;
    a.n = static_cast<int>(detail::read_be32(is, images_path));
    a.height = static_cast<int>(detail::read_be32(is, images_path));
    a.width = static_cast<int>(detail::read_be32(is, images_path));
    a.channels = 1;
    a.pixels.resize(static_cast<size_t>(a.n) * a.height * a.width);
    is.read(reinterpret_cast<char*>(a.pixels.data()),
            static_cast<std::streamsize>(a.pixels.size()));
    if (!is) throw FormatError("idx: truncated image payload in " + images_path);

    if (labels_path.empty()) {
        a.labels.assign(static_cast<size_t>(a.n), kUnlabeled);
        a.class_count = 0;
    } else {
        std::ifstream ls(labels_path, std::ios::binary);
        if (!ls) throw DataError("idx: cannot open " + labels_path);
        if (detail::read_be32(ls, labels_path) != 0x00000801)
            throw FormatError("idx: bad label magic in " + labels_path);
        int ln = static_cast<int>(detail::read_be32(ls, labels_path));
        if (ln != a.n) throw FormatError("idx: image/label count mismatch");
        int max_label = 0;
        for (int i = 0; i < ln; ++i) {
            char c;
            ls.read(&c, 1);
            if (!ls) throw FormatError("idx: truncated labels in " + labels_path);
            a.labels.push_back(static_cast<uint16_t>(static_cast<unsigned char>(c)));
            max_label = std::max(max_label, static_cast<int>(static_cast<unsigned char>(c)));
        }
        a.class_count = max_label + 1;
    }
    a.validate();
    return a;
}

// ---------------------------------------------------------------------------
// Built-in synthetic shapes benchmark
// ---------------------------------------------------------------------------

// Circles (class 0) and squares (class 1) on a dark background. The private
// domain renders the same shapes with a shifted style: dimmer fill and
// smaller extent. Class-balanced by construction.
struct ShapesConfig {
    int count = 1024;
    int hw = 16;
    uint64_t seed = 1;
    bool private_domain = false;
    double fill_lo = 0.85, fill_hi = 1.0;    // public style
    double radius_lo = 3.2, radius_hi = 4.6;

    static ShapesConfig domain(bool priv, int count, int hw, uint64_t seed) {
        ShapesConfig c;
        c.count = count;
        c.hw = hw;
        c.seed = seed;
        c.private_domain = priv;
        if (priv) {
            c.fill_lo = 0.35;
            c.fill_hi = 0.55;
            c.radius_lo = 2.4;
            c.radius_hi = 3.4;
        }
        return c;
    }
};

inline DatasetArchive generate_shapes(const ShapesConfig& cfg) {
    if (cfg.count < 1 || cfg.hw < 8) throw ConfigError("shapes: need count >= 1 and extent >= 8");
    Tensor imgs({cfg.count, 1, cfg.hw, cfg.hw});
    std::vector<int> labels(static_cast<size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        Rng rng = keyed_rng(cfg.seed, cfg.private_domain ? "shape-priv" : "shape-pub",
                            static_cast<uint64_t>(i));
        int cls = i % 2;
        labels[static_cast<size_t>(i)] = cls;
        double fill = cfg.fill_lo + (cfg.fill_hi - cfg.fill_lo) * rng.uniform();
        double radius = cfg.radius_lo + (cfg.radius_hi - cfg.radius_lo) * rng.uniform();
        double cx = cfg.hw / 2.0 + (rng.uniform() - 0.5) * 3.0;
        double cy = cfg.hw / 2.0 + (rng.uniform() - 0.5) * 3.0;
        for (int y = 0; y < cfg.hw; ++y) {
            for (int x = 0; x < cfg.hw; ++x) {
                double coverage;
                if (cls == 0) {
                    double dist = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
                    coverage = std::clamp(radius + 0.5 - dist, 0.0, 1.0);
                } else {
                    double dx = std::abs(x - cx), dy = std::abs(y - cy);
                    coverage = std::clamp(radius + 0.5 - std::max(dx, dy), 0.0, 1.0);
                }
                imgs[(static_cast<int64_t>(i) * cfg.hw + y) * cfg.hw + x] =
                    -1.0 + 2.0 * fill * coverage;
            }
        }
    }
    return DatasetArchive::from_tensor(imgs, labels, 2);
}

}  // namespace privdiff
