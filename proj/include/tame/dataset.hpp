#pragma once

// Synthetic shape-classification dataset: colored disk / square / triangle on
// a noisy, cluttered background. Stands in for a natural-image corpus at desk
// scale; classes are separable by silhouette while noise keeps classifier
// confidence away from saturation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tame/error.hpp"
#include "tame/image_io.hpp"
#include "tame/rng.hpp"
#include "tame/serialize.hpp"
#include "tame/tensor.hpp"

namespace tame {

struct SyntheticDatasetSpec {
    std::vector<std::string> class_names{"disk", "square", "triangle"};
    int64_t image_size = 64;
    int64_t train_count = 600;  // totals per split; labels assigned round-robin
    int64_t val_count = 200;
    int64_t test_count = 200;
    uint64_t seed = 7;
    double background_noise = 0.06;  // gaussian sigma on [0,1] values
    double speckle_fraction = 0.05;  // fraction of pixels replaced by random color
    int64_t clutter_max = 6;         // max distractor blobs per image
    double scale_min = 0.16;         // shape radius as fraction of image size
    double scale_max = 0.30;
    double center_jitter = 0.16;     // center offset as fraction of image size
};

inline std::string dataset_spec_canonical(const SyntheticDatasetSpec& s) {
    std::ostringstream os;
    os.precision(17);
    os << "classes=";
    for (size_t i = 0; i < s.class_names.size(); ++i) os << (i ? "," : "") << s.class_names[i];
    os << ";image_size=" << s.image_size << ";train=" << s.train_count << ";val=" << s.val_count
       << ";test=" << s.test_count << ";seed=" << s.seed << ";noise=" << s.background_noise
       << ";speckle=" << s.speckle_fraction << ";clutter=" << s.clutter_max
       << ";scale=" << s.scale_min << "," << s.scale_max << ";jitter=" << s.center_jitter;
    return os.str();
}

inline uint64_t dataset_digest(const SyntheticDatasetSpec& s) {
    return fnv1a64(dataset_spec_canonical(s));
}

struct DatasetStats {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.25, 0.25, 0.25};
};

struct DatasetSplit {
    std::vector<ImageU8> images;
    std::vector<int64_t> labels;
    std::vector<std::string> paths;  // relative to the dataset dir
};

struct Dataset {
    std::vector<std::string> class_names;
    int64_t image_size = 0;
    uint64_t seed = 0;
    uint64_t digest = 0;
    DatasetStats stats;
    DatasetSplit train, val, test;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

// Coverage of a pixel by the class shape, 2x2 supersampled for soft edges.
inline double shape_coverage(int64_t cls, double px, double py, double cx, double cy, double r) {
    int hits = 0;
    for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
            double x = px + 0.25 + 0.5 * sx;
            double y = py + 0.25 + 0.5 * sy;
            bool inside = false;
            switch (cls % 3) {
                case 0: {  // disk
                    double dx = x - cx, dy = y - cy;
                    inside = dx * dx + dy * dy <= r * r;
                    break;
                }
                case 1: {  // axis-aligned square
                    inside = std::abs(x - cx) <= r * 0.9 && std::abs(y - cy) <= r * 0.9;
                    break;
                }
                default: {  // upward triangle via half-plane tests
                    double ax = cx, ay = cy - r;
                    double bx = cx - 0.95 * r, by = cy + 0.75 * r;
                    double ex = cx + 0.95 * r, ey = cy + 0.75 * r;
                    auto side = [&](double x1, double y1, double x2, double y2) {
                        return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
                    };
                    double d1 = side(ax, ay, bx, by);
                    double d2 = side(bx, by, ex, ey);
                    double d3 = side(ex, ey, ax, ay);
                    inside = (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0);
                    break;
                }
            }
            if (inside) ++hits;
        }
    return hits / 4.0;
}

inline ImageU8 render_sample(const SyntheticDatasetSpec& spec, int64_t cls, Rng rng) {
    int64_t n = spec.image_size;
    std::vector<double> pix(static_cast<size_t>(n * n * 3));

    // Muted background with per-channel tint and gaussian noise.
    std::array<double, 3> bg{};
    for (auto& v : bg) v = rng.uniform(0.30, 0.70);
    for (int64_t i = 0; i < n * n; ++i)
        for (int c = 0; c < 3; ++c)
            pix[static_cast<size_t>(i * 3 + c)] =
                bg[static_cast<size_t>(c)] + rng.normal(0.0, spec.background_noise);

    // Distractor blobs: small soft disks in muted colors.
    int64_t blobs = rng.range(spec.clutter_max / 2, spec.clutter_max);
    for (int64_t b = 0; b < blobs; ++b) {
        double bx = rng.uniform(0.0, static_cast<double>(n));
        double by = rng.uniform(0.0, static_cast<double>(n));
        double br = rng.uniform(0.03, 0.08) * static_cast<double>(n);
        std::array<double, 3> color{};
        for (auto& v : color) v = rng.uniform(0.2, 0.8);
        int64_t lo_y = std::max<int64_t>(0, static_cast<int64_t>(by - br - 1));
        int64_t hi_y = std::min(n - 1, static_cast<int64_t>(by + br + 1));
        int64_t lo_x = std::max<int64_t>(0, static_cast<int64_t>(bx - br - 1));
        int64_t hi_x = std::min(n - 1, static_cast<int64_t>(bx + br + 1));
        for (int64_t y = lo_y; y <= hi_y; ++y)
            for (int64_t x = lo_x; x <= hi_x; ++x) {
                double dx = x + 0.5 - bx, dy = y + 0.5 - by;
                if (dx * dx + dy * dy > br * br) continue;
                for (int c = 0; c < 3; ++c) {
                    size_t idx = static_cast<size_t>((y * n + x) * 3 + c);
                    pix[idx] = 0.5 * pix[idx] + 0.5 * color[static_cast<size_t>(c)];
                }
            }
    }

    // The class shape: one saturated channel so color never encodes the label.
    double cx = (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter)) * n;
    double cy = (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter)) * n;
    double r = rng.uniform(spec.scale_min, spec.scale_max) * n;
    std::array<double, 3> shape_color{rng.uniform(0.0, 0.25), rng.uniform(0.0, 0.25),
                                      rng.uniform(0.0, 0.25)};
    shape_color[static_cast<size_t>(rng.below(3))] = rng.uniform(0.75, 1.0);
    for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
            double cov = shape_coverage(cls, static_cast<double>(x), static_cast<double>(y), cx,
                                        cy, r);
            if (cov <= 0.0) continue;
            for (int c = 0; c < 3; ++c) {
                size_t idx = static_cast<size_t>((y * n + x) * 3 + c);
                pix[idx] = (1.0 - cov) * pix[idx] + cov * shape_color[static_cast<size_t>(c)];
            }
        }

    // Speckle over the whole frame, shape included.
    int64_t speckles = static_cast<int64_t>(spec.speckle_fraction * static_cast<double>(n * n));
    for (int64_t s = 0; s < speckles; ++s) {
        int64_t p = rng.below(n * n);
        for (int c = 0; c < 3; ++c)
            pix[static_cast<size_t>(p * 3 + c)] = rng.u01();
    }

    ImageU8 img;
    img.h = n;
    img.w = n;
    img.rgb.resize(pix.size());
    for (size_t i = 0; i < pix.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, pix[i]));
        img.rgb[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

inline DatasetSplit generate_split(const SyntheticDatasetSpec& spec, int64_t count,
                                   const std::string& split_name, uint64_t split_tag) {
    DatasetSplit out;
    Rng split_rng = Rng(spec.seed).fork(split_tag);
    int64_t classes = static_cast<int64_t>(spec.class_names.size());
    for (int64_t i = 0; i < count; ++i) {
        int64_t label = i % classes;
        out.images.push_back(render_sample(spec, label, split_rng.fork(static_cast<uint64_t>(i))));
        out.labels.push_back(label);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s/img_%05lld.ppm", split_name.c_str(),
                      static_cast<long long>(i));
        out.paths.emplace_back(buf);
    }
    return out;
}

}  // namespace detail

inline Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
    TAME_CHECK_CONFIG(spec.class_names.size() >= 2, "dataset needs at least 2 classes");
    TAME_CHECK_CONFIG(spec.image_size >= 16, "dataset image size too small");
    Dataset ds;
    ds.class_names = spec.class_names;
    ds.image_size = spec.image_size;
    ds.seed = spec.seed;
    ds.digest = dataset_digest(spec);
    ds.train = detail::generate_split(spec, spec.train_count, "train", 0);
    ds.val = detail::generate_split(spec, spec.val_count, "val", 1);
    ds.test = detail::generate_split(spec, spec.test_count, "test", 2);

    // Channel statistics over the train split, computed on [0,1] values.
    std::array<double, 3> sum{}, sumsq{};
    int64_t count = 0;
    for (const auto& img : ds.train.images) {
        for (int64_t i = 0; i < img.h * img.w; ++i)
            for (int c = 0; c < 3; ++c) {
                double v = img.rgb[static_cast<size_t>(i * 3 + c)] / 255.0;
                sum[static_cast<size_t>(c)] += v;
                sumsq[static_cast<size_t>(c)] += v * v;
            }
        count += img.h * img.w;
    }
    for (int c = 0; c < 3; ++c) {
        double m = sum[static_cast<size_t>(c)] / static_cast<double>(count);
        double var = sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - m * m;
        ds.stats.mean[static_cast<size_t>(c)] = m;
        ds.stats.stddev[static_cast<size_t>(c)] = std::sqrt(std::max(var, 1e-12));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/{train,val,test}/img_%05d.ppm plus <dir>/index.csv
// ---------------------------------------------------------------------------

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (size_t i = 0; i < split->images.size(); ++i) {
            fs::path p = dir / split->paths[i];
            fs::create_directories(p.parent_path(), ec);
            write_ppm(p, split->images[i]);
        }
    }
    std::ofstream os(dir / "index.csv", std::ios::trunc);
    TAME_CHECK_IO(os.good(), "cannot write dataset index in ", dir.string());
    os << "# tame-dataset v1\n";
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(ds.digest));
    os << "# digest=" << hex << "\n# classes=";
    for (size_t i = 0; i < ds.class_names.size(); ++i) os << (i ? "," : "") << ds.class_names[i];
    os << "\n# image_size=" << ds.image_size << "\n# seed=" << ds.seed << "\n";
    os.precision(12);
    os << "# mean=" << ds.stats.mean[0] << "," << ds.stats.mean[1] << "," << ds.stats.mean[2]
       << "\n";
    os << "# std=" << ds.stats.stddev[0] << "," << ds.stats.stddev[1] << ","
       << ds.stats.stddev[2] << "\n";
    os << "path,label,split\n";
    auto rows = [&](const DatasetSplit& s, const char* name) {
        for (size_t i = 0; i < s.paths.size(); ++i)
            os << s.paths[i] << "," << s.labels[i] << "," << name << "\n";
    };
    rows(ds.train, "train");
    rows(ds.val, "val");
    rows(ds.test, "test");
    TAME_CHECK_IO(os.good(), "write failed for dataset index");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.csv");
    TAME_CHECK_IO(is.good(), "cannot open dataset index ", (dir / "index.csv").string());
    Dataset ds;
    std::string line;
    bool header_done = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(2, eq - 2);
            std::string value = line.substr(eq + 1);
            if (key == "digest") {
                ds.digest = std::stoull(value, nullptr, 16);
            } else if (key == "classes") {
                std::stringstream ss(value);
                std::string name;
                while (std::getline(ss, name, ',')) ds.class_names.push_back(name);
            } else if (key == "image_size") {
                ds.image_size = std::stoll(value);
            } else if (key == "seed") {
                ds.seed = std::stoull(value);
            } else if (key == "mean" || key == "std") {
                std::stringstream ss(value);
                std::string num;
                int c = 0;
                while (std::getline(ss, num, ',') && c < 3) {
                    if (key == "mean")
                        ds.stats.mean[static_cast<size_t>(c)] = std::stod(num);
                    else
                        ds.stats.stddev[static_cast<size_t>(c)] = std::stod(num);
                    ++c;
                }
            }
            continue;
        }
        if (!header_done) {  // column header row
            header_done = true;
            continue;
        }
        std::stringstream ss(line);
        std::string path, label, split;
        std::getline(ss, path, ',');
        std::getline(ss, label, ',');
        std::getline(ss, split, ',');
        DatasetSplit* target = split == "train" ? &ds.train
                               : split == "val" ? &ds.val
                               : split == "test" ? &ds.test
                                                 : nullptr;
        TAME_CHECK_IO(target != nullptr, "unknown split '", split, "' in dataset index");
        target->paths.push_back(path);
        target->labels.push_back(std::stoll(label));
        target->images.push_back(read_ppm(dir / path));
    }
    TAME_CHECK_IO(!ds.train.images.empty(), "dataset index has no training rows");
    return ds;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Decode to [0,1], normalize per channel with the dataset statistics.
template <typename T>
Tensor<T> to_tensor(const ImageU8& img, const DatasetStats& stats) {
    Tensor<T> t = Tensor<T>::zeros({3, img.h, img.w});
    T* p = t.ptr();
    for (int c = 0; c < 3; ++c) {
        double mean = stats.mean[static_cast<size_t>(c)];
        double inv_std = 1.0 / stats.stddev[static_cast<size_t>(c)];
        for (int64_t i = 0; i < img.h * img.w; ++i)
            p[c * img.h * img.w + i] = static_cast<T>(
                (img.rgb[static_cast<size_t>(i * 3 + c)] / 255.0 - mean) * inv_std);
    }
    return t;
}

// Stacks selected samples into [N,3,H,W]. When `aug_rng` is given, each sample
// is shifted by up to `max_shift` pixels (vacated pixels read 0 = channel mean
// after normalization); this is the train-time crop policy at desk scale.
template <typename T>
Tensor<T> stack_batch(const DatasetSplit& split, const DatasetStats& stats,
                      const std::vector<int64_t>& indices, Rng* aug_rng = nullptr,
                      int64_t max_shift = 4) {
    TAME_CHECK_VALUE(!indices.empty(), "empty batch");
    int64_t h = split.images[0].h, w = split.images[0].w;
    Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(indices.size()), 3, h, w});
    for (size_t bi = 0; bi < indices.size(); ++bi) {
        const ImageU8& img = split.images[static_cast<size_t>(indices[bi])];
        Tensor<T> t = to_tensor<T>(img, stats);
        int64_t dx = 0, dy = 0;
        if (aug_rng) {
            dx = aug_rng->range(-max_shift, max_shift);
            dy = aug_rng->range(-max_shift, max_shift);
        }
        T* dst = out.ptr() + static_cast<int64_t>(bi) * 3 * h * w;
        const T* src = t.ptr();
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    int64_t sy = y - dy, sx = x - dx;
                    T v = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                              ? src[(c * h + sy) * w + sx]
                              : T(0);
                    dst[(c * h + y) * w + x] = v;
                }
    }
    return out;
}

}  // namespace tame
