#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rtl/error.hpp"
#include "rtl/hash.hpp"
#include "rtl/tensor.hpp"

namespace rtl {

enum class Split { Train, Test };
enum class MetricKind { Top1, MeanPerClass };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }
inline std::string to_string(MetricKind m) { return m == MetricKind::Top1 ? "top1" : "mean_per_class"; }

inline MetricKind metric_kind_from_string(std::string_view s) {
    if (s == "top1") return MetricKind::Top1;
    if (s == "mean_per_class") return MetricKind::MeanPerClass;
    throw ConfigError("unknown metric kind '" + std::string(s) + "'");
}

/// Labeled images in [0,1], NCHW.
struct Dataset {
    std::string name;
    Tensor images;
    std::vector<int> labels;
    Split split = Split::Train;
    MetricKind metric_kind = MetricKind::Top1;
    std::size_t class_count = 2;
    bool orientation_sensitive = false;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }

    void validate() const {
        if (images.rank() != 4) throw DimensionError("dataset images must be N,C,H,W; got " + shape_string(images.shape()));
        if (images.dim(0) != labels.size()) {
            throw DimensionError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                                 std::to_string(labels.size()) + " labels");
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
                throw ContractError("label " + std::to_string(labels[i]) + " at record " + std::to_string(i) +
                                    " outside [0," + std::to_string(class_count) + ")");
            }
        }
        if (split == Split::Train) {
            std::vector<bool> seen(class_count, false);
            for (int y : labels) seen[static_cast<std::size_t>(y)] = true;
            for (std::size_t c = 0; c < class_count; ++c)
                if (!seen[c]) throw ContractError("class " + std::to_string(c) + " missing from train split");
        }
    }

    Dataset subset(std::span<const std::size_t> rows) const {
        Dataset out = *this;
        out.images = images.gather_rows(rows);
        out.labels.clear();
        for (std::size_t r : rows) out.labels.push_back(labels[r]);
        return out;
    }

    std::string serialize() const;
    std::uint64_t content_hash() const { return fnv1a(serialize()); }
};

struct SplitDataset {
    Dataset train;
    Dataset test;
};

enum class SyntheticKind { SinglePixel, GaussianBlobs };

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::GaussianBlobs;
    std::string name = "synthetic";
    /// SinglePixel class offset: pixel (0,0) of channel 0 equals delta * label.
    double delta = 0.1;
    std::size_t n_per_class = 100;
    std::size_t class_count = 2;
    std::size_t channels = 1;
    std::size_t size = 8;
    /// GaussianBlobs: pairwise L2 distance between class templates.
    double margin = 1.0;
    double sigma = 0.1;
    /// GaussianBlobs: templates are constant on blocks of a
    /// template_resolution x template_resolution grid (0 means per-pixel).
    std::size_t template_resolution = 0;
    MetricKind metric_kind = MetricKind::Top1;
    std::uint64_t seed = 0;
};

namespace detail {

/// Stratified 50/50 split: within each class, a seeded shuffle sends the first
/// ceil(n/2) samples to train.
inline SplitDataset stratified_split(Dataset all, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x5eed5eed5eed5eedULL);
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t c = 0; c < all.class_count; ++c) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < all.size(); ++i)
            if (static_cast<std::size_t>(all.labels[i]) == c) rows.push_back(i);
        std::shuffle(rows.begin(), rows.end(), rng);
        const std::size_t n_train = (rows.size() + 1) / 2;
        train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
        test_rows.insert(test_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    SplitDataset out{all.subset(train_rows), all.subset(test_rows)};
    out.train.split = Split::Train;
    out.test.split = Split::Test;
    return out;
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace detail

/// Two-class dataset whose label is carried by a single pixel: x[0,0,0] =
/// delta * y, every other pixel 0.
inline SplitDataset make_single_pixel(const SyntheticSpec& spec) {
    if (!(spec.delta > 0.0)) throw ConfigError("single-pixel delta must be positive");
    if (spec.n_per_class == 0 || spec.size == 0 || spec.channels == 0) {
        throw ConfigError("single-pixel dataset needs positive n_per_class, channels and size");
    }
    const std::size_t n = 2 * spec.n_per_class;
    Dataset all;
    all.name = spec.name;
    all.class_count = 2;
    all.metric_kind = spec.metric_kind;
    all.orientation_sensitive = true;
    all.images = Tensor(Shape{n, spec.channels, spec.size, spec.size}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        all.labels.push_back(y);
        all.images.at(i, 0, 0, 0) = detail::clamp01(spec.delta * y);
    }
    return detail::stratified_split(std::move(all), spec.seed);
}

/// Class templates 0.5 + s*u_c with orthonormal u_c, so every pair of
/// templates sits exactly `margin` apart in L2.
inline std::vector<std::vector<double>> blob_templates(const SyntheticSpec& spec) {
    if (!(spec.margin > 0.0)) throw ConfigError("blob margin must be positive");
    if (spec.class_count < 2) throw ConfigError("blobs need at least 2 classes");
    const std::size_t res = spec.template_resolution == 0 ? spec.size : spec.template_resolution;
    if (spec.size % res != 0) throw ConfigError("template_resolution must divide the image size");
    const std::size_t dim = spec.channels * spec.size * spec.size;
    if (spec.class_count > spec.channels * res * res) {
        throw ConfigError("too many classes for the template resolution (need class_count <= channels*res^2)");
    }
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t block = spec.size / res;
    std::vector<std::vector<double>> dirs;
    for (std::size_t c = 0; c < spec.class_count; ++c) {
        std::vector<double> coarse(spec.channels * res * res);
        for (double& v : coarse) v = normal(rng);
        std::vector<double> u(dim);
        for (std::size_t ch = 0; ch < spec.channels; ++ch)
            for (std::size_t h = 0; h < spec.size; ++h)
                for (std::size_t w = 0; w < spec.size; ++w)
                    u[(ch * spec.size + h) * spec.size + w] = coarse[(ch * res + h / block) * res + w / block];
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& prev : dirs) {
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += u[i] * prev[i];
                for (std::size_t i = 0; i < dim; ++i) u[i] -= dot * prev[i];
            }
        double norm = 0.0;
        for (double v : u) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : u) v /= norm;
        dirs.push_back(std::move(u));
    }
    const double s = spec.margin / std::sqrt(2.0);
    std::vector<std::vector<double>> templates;
    for (const auto& u : dirs) {
        std::vector<double> t(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            t[i] = 0.5 + s * u[i];
            if (t[i] < 0.0 || t[i] > 1.0) {
                throw ConfigError("blob margin " + std::to_string(spec.margin) +
                                  " pushes templates outside [0,1]; lower the margin");
            }
        }
        templates.push_back(std::move(t));
    }
    return templates;
}

/// Gaussian clusters around well-separated class templates, clipped to [0,1].
inline SplitDataset make_blobs(const SyntheticSpec& spec) {
    if (spec.n_per_class == 0) throw ConfigError("blobs need n_per_class > 0");
    if (spec.sigma < 0.0) throw ConfigError("blob sigma must be nonnegative");
    const auto templates = blob_templates(spec);
    const std::size_t dim = spec.channels * spec.size * spec.size;
    const std::size_t n = spec.class_count * spec.n_per_class;
    Dataset all;
    all.name = spec.name;
    all.class_count = spec.class_count;
    all.metric_kind = spec.metric_kind;
    all.images = Tensor(Shape{n, spec.channels, spec.size, spec.size});
    std::mt19937_64 rng(spec.seed + 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % spec.class_count;
        all.labels.push_back(static_cast<int>(c));
        for (std::size_t k = 0; k < dim; ++k) {
            const double eps = spec.sigma > 0.0 ? spec.sigma * noise(rng) : 0.0;
            all.images[i * dim + k] = detail::clamp01(templates[c][k] + eps);
        }
    }
    return detail::stratified_split(std::move(all), spec.seed);
}

inline SplitDataset make_synthetic(const SyntheticSpec& spec) {
    return spec.kind == SyntheticKind::SinglePixel ? make_single_pixel(spec) : make_blobs(spec);
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"kind", s.kind == SyntheticKind::SinglePixel ? "single_pixel" : "blobs"},
                       {"name", s.name},
                       {"delta", s.delta},
                       {"n_per_class", s.n_per_class},
                       {"class_count", s.class_count},
                       {"channels", s.channels},
                       {"size", s.size},
                       {"margin", s.margin},
                       {"sigma", s.sigma},
                       {"template_resolution", s.template_resolution},
                       {"metric_kind", to_string(s.metric_kind)},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    const SyntheticSpec d;
    const std::string kind = j.value("kind", std::string("blobs"));
    if (kind == "single_pixel") s.kind = SyntheticKind::SinglePixel;
    else if (kind == "blobs") s.kind = SyntheticKind::GaussianBlobs;
    else throw ConfigError("unknown synthetic kind '" + kind + "' (expected single_pixel or blobs)");
    s.name = j.value("name", d.name);
    s.delta = j.value("delta", d.delta);
    s.n_per_class = j.value("n_per_class", d.n_per_class);
    s.class_count = j.value("class_count", d.class_count);
    s.channels = j.value("channels", d.channels);
    s.size = j.value("size", d.size);
    s.margin = j.value("margin", d.margin);
    s.sigma = j.value("sigma", d.sigma);
    s.template_resolution = j.value("template_resolution", d.template_resolution);
    s.metric_kind = metric_kind_from_string(j.value("metric_kind", std::string("top1")));
    s.seed = j.value("seed", d.seed);
}

// ---- resampling ----------------------------------------------------------------

enum class Resampling { Nearest, Bilinear };

/// Resize every image of an NCHW tensor. Nearest samples source index
/// floor(i * in / out) (exact integer arithmetic); Bilinear uses half-pixel
/// centers with edge clamping and no antialiasing.
inline Tensor resize(const Tensor& images, std::size_t out_h, std::size_t out_w, Resampling mode) {
    if (images.rank() != 4) throw DimensionError("resize needs N,C,H,W; got " + shape_string(images.shape()));
    const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (out_h == H && out_w == W) return Tensor(images.shape(), images.values());
    Tensor out(Shape{N, C, out_h, out_w});
    if (mode == Resampling::Nearest) {
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t i = 0; i < out_h; ++i) {
                const std::size_t si = i * H / out_h;
                for (std::size_t j = 0; j < out_w; ++j) {
                    const std::size_t sj = j * W / out_w;
                    out[(nc * out_h + i) * out_w + j] = images[(nc * H + si) * W + sj];
                }
            }
        return out;
    }
    auto coord = [](std::size_t dst, std::size_t in, std::size_t outn, std::size_t& lo, std::size_t& hi, double& frac) {
        double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
        lo = static_cast<std::size_t>(std::floor(src));
        hi = std::min(lo + 1, in - 1);
        frac = src - static_cast<double>(lo);
    };
    for (std::size_t i = 0; i < out_h; ++i) {
        std::size_t h0, h1;
        double fh;
        coord(i, H, out_h, h0, h1, fh);
        for (std::size_t j = 0; j < out_w; ++j) {
            std::size_t w0, w1;
            double fw;
            coord(j, W, out_w, w0, w1, fw);
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const double* p = images.data().data() + nc * H * W;
                const double top = p[h0 * W + w0] * (1.0 - fw) + p[h0 * W + w1] * fw;
                const double bot = p[h1 * W + w0] * (1.0 - fw) + p[h1 * W + w1] * fw;
                out[(nc * out_h + i) * out_w + j] = detail::clamp01(top * (1.0 - fh) + bot * fh);
            }
        }
    }
    return out;
}

/// Resize to low x low, then back up to high x high.
inline Tensor downscale_upscale(const Tensor& images, std::size_t low, std::size_t high, Resampling mode) {
    if (low < 1 || high < low) throw ConfigError("downscale_upscale needs high >= low >= 1");
    return resize(resize(images, low, low, mode), high, high, mode);
}

/// Crop [top, top+h) x [left, left+w) from every image.
inline Tensor crop(const Tensor& images, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (top + h > H || left + w > W) throw DimensionError("crop window exceeds image on axes H,W");
    Tensor out(Shape{N, C, h, w});
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) out[(nc * h + i) * w + j] = images[(nc * H + top + i) * W + left + j];
    return out;
}

inline Tensor hflip(const Tensor& images) {
    const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    Tensor out(images.shape());
    for (std::size_t nch = 0; nch < N * C * H; ++nch)
        for (std::size_t j = 0; j < W; ++j) out[nch * W + j] = images[nch * W + (W - 1 - j)];
    return out;
}

/// Evaluation transform: resize to round(size * resize_ratio), then center crop to size.
inline Tensor resize_center_crop(const Tensor& images, std::size_t size, double resize_ratio = 8.0 / 7.0,
                                 Resampling mode = Resampling::Bilinear) {
    const auto big = static_cast<std::size_t>(std::lround(static_cast<double>(size) * resize_ratio));
    if (big < size) throw ConfigError("resize_ratio must be >= 1");
    const Tensor r = resize(images, big, big, mode);
    const std::size_t off = (big - size) / 2;
    return crop(r, off, off, size, size);
}

// ---- augmentation ---------------------------------------------------------------

struct AugmentPolicy {
    bool random_resized_crop = false;
    double scale_min = 0.08;
    double scale_max = 1.0;
    double ratio_min = 3.0 / 4.0;
    double ratio_max = 4.0 / 3.0;
    double flip_prob = 0.0;
    /// Output edge length; 0 keeps the input size.
    std::size_t output_size = 0;

    static AugmentPolicy none() { return {}; }

    /// Random resized crop plus horizontal flip (disabled for orientation-sensitive data).
    static AugmentPolicy standard(bool orientation_sensitive) {
        AugmentPolicy p;
        p.random_resized_crop = true;
        p.flip_prob = orientation_sensitive ? 0.0 : 0.5;
        return p;
    }

    bool identity() const { return !random_resized_crop && flip_prob == 0.0 && output_size == 0; }
};

/// Per-sample random resized crop and horizontal flip, deterministic in `rng`.
inline Tensor augment(const Tensor& batch, const AugmentPolicy& policy, std::mt19937_64& rng,
                      bool orientation_sensitive = false) {
    if (orientation_sensitive && policy.flip_prob > 0.0) {
        throw ContractError("horizontal flips are not allowed on an orientation-sensitive dataset");
    }
    if (policy.identity()) return Tensor(batch.shape(), batch.values());
    const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    const std::size_t out_size = policy.output_size ? policy.output_size : H;
    Tensor out(Shape{N, C, out_size, out_size});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t n = 0; n < N; ++n) {
        Tensor img = batch.slice_rows(n, 1);
        if (policy.random_resized_crop) {
            const double area = static_cast<double>(H * W);
            std::size_t ch = H, cw = W, top = 0, left = 0;
            bool found = false;
            std::uniform_real_distribution<double> scale(policy.scale_min, policy.scale_max);
            std::uniform_real_distribution<double> log_ratio(std::log(policy.ratio_min), std::log(policy.ratio_max));
            for (int attempt = 0; attempt < 10 && !found; ++attempt) {
                const double target = area * scale(rng);
                const double aspect = std::exp(log_ratio(rng));
                const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
                const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
                if (w > 0 && h > 0 && w <= W && h <= H) {
                    ch = h;
                    cw = w;
                    top = std::uniform_int_distribution<std::size_t>(0, H - h)(rng);
                    left = std::uniform_int_distribution<std::size_t>(0, W - w)(rng);
                    found = true;
                }
            }
            if (!found) {
                const double in_ratio = static_cast<double>(W) / static_cast<double>(H);
                if (in_ratio < policy.ratio_min) {
                    cw = W;
                    ch = static_cast<std::size_t>(std::lround(static_cast<double>(cw) / policy.ratio_min));
                } else if (in_ratio > policy.ratio_max) {
                    ch = H;
                    cw = static_cast<std::size_t>(std::lround(static_cast<double>(ch) * policy.ratio_max));
                }
                top = (H - ch) / 2;
                left = (W - cw) / 2;
            }
            img = crop(img, top, left, ch, cw);
        }
        img = resize(img, out_size, out_size, Resampling::Bilinear);
        if (policy.flip_prob > 0.0 && unit(rng) < policy.flip_prob) img = hflip(img);
        std::copy(img.values().begin(), img.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(n * img.size()));
    }
    return out;
}

// ---- file format ----------------------------------------------------------------
//
// One JSON header line {name, shape, class_count, metric_kind, split,
// orientation_sensitive}, then the images as raw little-endian f64, then the
// labels as little-endian int32.

inline std::string Dataset::serialize() const {
    std::ostringstream out(std::ios::binary);
    nlohmann::json header;
    header["name"] = name;
    header["shape"] = images.shape();
    header["class_count"] = class_count;
    header["metric_kind"] = to_string(metric_kind);
    header["split"] = to_string(split);
    header["orientation_sensitive"] = orientation_sensitive;
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(images.data().data()),
              static_cast<std::streamsize>(images.size() * sizeof(double)));
    for (int y : labels) {
        const auto v = static_cast<std::int32_t>(y);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    return out.str();
}

inline Dataset parse_dataset(std::string_view bytes, const std::string& origin = "<memory>") {
    const std::size_t nl = bytes.find('\n');
    if (nl == std::string_view::npos) throw LoadError(origin + ": header line missing");
    nlohmann::json header;
    Dataset d;
    Shape shape;
    try {
        header = nlohmann::json::parse(bytes.substr(0, nl));
        d.name = header.at("name").get<std::string>();
        shape = header.at("shape").get<Shape>();
        d.class_count = header.at("class_count").get<std::size_t>();
        d.metric_kind = metric_kind_from_string(header.at("metric_kind").get<std::string>());
        const auto split = header.at("split").get<std::string>();
        if (split != "train" && split != "test") throw LoadError(origin + ": unknown split '" + split + "'");
        d.split = split == "train" ? Split::Train : Split::Test;
        d.orientation_sensitive = header.value("orientation_sensitive", false);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(origin + ": bad header: " + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(origin + ": " + e.what());
    }
    if (shape.size() != 4 || std::find(shape.begin(), shape.end(), 0u) != shape.end()) {
        throw LoadError(origin + ": header shape " + shape_string(shape) + " is not a positive N,C,H,W");
    }
    const std::size_t n = shape[0];
    const std::size_t values = shape_size(shape);
    const std::size_t expected = nl + 1 + values * sizeof(double) + n * sizeof(std::int32_t);
    if (bytes.size() != expected) {
        throw LoadError(origin + ": body is " + std::to_string(bytes.size() - nl - 1) + " bytes, header shape " +
                        shape_string(shape) + " needs " + std::to_string(expected - nl - 1));
    }
    std::vector<double> data(values);
    std::memcpy(data.data(), bytes.data() + nl + 1, values * sizeof(double));
    d.images = Tensor(shape, std::move(data));
    const char* lp = bytes.data() + nl + 1 + values * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
        std::int32_t y;
        std::memcpy(&y, lp + i * sizeof y, sizeof y);
        if (y < 0 || static_cast<std::size_t>(y) >= d.class_count) {
            throw LoadError(origin + ": record " + std::to_string(i) + " has label " + std::to_string(y) +
                            " outside [0," + std::to_string(d.class_count) + ")");
        }
        d.labels.push_back(y);
    }
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        if (!(d.images[i] >= 0.0 && d.images[i] <= 1.0)) {
            throw LoadError(origin + ": record " + std::to_string(i / (values / n)) + " has a pixel outside [0,1]");
        }
    }
    return d;
}

inline void save(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("cannot write dataset " + path);
    const std::string bytes = d.serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Dataset load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("dataset not found: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_dataset(buf.str(), path);
}

}  // namespace rtl
