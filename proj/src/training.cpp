#include "pseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "pseg/io.hpp"
#include "pseg/preprocess.hpp"

namespace pseg {

using ad::Graph;
using ad::Tensor;
using json = nlohmann::json;

AugmentConfig AugmentConfig::none() {
    AugmentConfig c;
    c.flip_probability = 0.0;
    c.affine_probability = 0.0;
    c.color_probability = 0.0;
    c.grayscale_probability = 0.0;
    c.temporal_strides = {1};
    return c;
}

void TrainConfig::validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::usage, "train config: " + what); };
    if (!(lr_encoder > 0) || !(lr_other > 0)) bad("learning rates must be positive");
    if (!(focal_weight > 0) || !(dice_weight > 0) || iou_weight < 0) bad("loss weights must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) bad("betas must be in [0, 1)");
    if (weight_decay < 0) bad("weight_decay must be non-negative");
    if (frames_per_sample < 1) bad("frames_per_sample must be >= 1");
    if (epochs < 0 || batch_size < 1 || samples_per_epoch < 0) bad("epochs/batch_size out of range");
    if (box_jitter_max < box_jitter_min || box_jitter_max < 0) bad("jitter bounds");
    for (const auto& [k, w] : modality_sampling) {
        if (w < 0) bad("negative sampling weight for " + k);
    }
    for (int s : augment.temporal_strides) {
        if (s < 1) bad("temporal strides must be >= 1");
    }
}

// ---------------------------------------------------------------------------
// losses

namespace {

template <typename T>
void check_target(const Tensor<T>& logits, const std::vector<T>& target, const char* op) {
    if (logits.numel() != target.size()) {
        fail(ErrorKind::shape, std::string(op) + ": " + std::to_string(logits.numel()) + " logits vs " +
                                   std::to_string(target.size()) + " targets");
    }
    for (T t : target) {
        if (t != T(0) && t != T(1)) fail(ErrorKind::usage, std::string(op) + ": targets must be 0 or 1");
    }
}

template <typename T>
T stable_sigmoid(T x) {
    return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// log(1 + exp(x)) without overflow
template <typename T>
T softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

template <typename T>
Tensor<T> focal_loss(Graph<T>& g, const Tensor<T>& logits, const std::vector<T>& target, T gamma, T alpha) {
    check_target(logits, target, "focal_loss");
    const std::size_t n = target.size();
    // z = x on positives, -x on negatives: p_t = sigmoid(z) and
    // loss = alpha_t * sigmoid(-z)^gamma * softplus(-z)
    T sum = 0;
    std::vector<T> dx(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = target[i] == T(1);
        const T z = pos ? logits[i] : -logits[i];
        const T a = pos ? alpha : T(1) - alpha;
        const T q = stable_sigmoid(-z), sp = softplus(-z);
        const T qg = std::pow(q, gamma);
        sum += a * qg * sp;
        const T dz = -a * qg * (gamma * stable_sigmoid(z) * sp + q);
        dx[i] = (pos ? dz : -dz) / static_cast<T>(n);
    }
    return g.custom({1}, {sum / static_cast<T>(n)}, {logits}, [logits, dx = std::move(dx)](std::span<const T> go) {
        auto gl = Graph<T>::accumulate_grad(logits);
        for (std::size_t i = 0; i < dx.size(); ++i) gl[i] += go[0] * dx[i];
    });
}

template <typename T>
Tensor<T> dice_loss(Graph<T>& g, const Tensor<T>& logits, const std::vector<T>& target, T smooth) {
    check_target(logits, target, "dice_loss");
    const std::size_t n = target.size();
    std::vector<T> p(n);
    T inter = 0, psum = 0, tsum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = stable_sigmoid(logits[i]);
        inter += p[i] * target[i];
        psum += p[i];
        tsum += target[i];
    }
    const T num = T(2) * inter + smooth, den = psum + tsum + smooth;
    std::vector<T> dx(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T dp = -(T(2) * target[i] * den - num) / (den * den);
        dx[i] = dp * p[i] * (T(1) - p[i]);
    }
    return g.custom({1}, {T(1) - num / den}, {logits}, [logits, dx = std::move(dx)](std::span<const T> go) {
        auto gl = Graph<T>::accumulate_grad(logits);
        for (std::size_t i = 0; i < dx.size(); ++i) gl[i] += go[0] * dx[i];
    });
}

template <typename T>
double binary_iou(std::span<const T> logits, const std::vector<T>& target) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const bool p = logits[i] > T(0), t = target[i] > T(0.5);
        inter += p && t;
        uni += p || t;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const Tensor<T>& logits, const std::vector<T>& target,
                        const Tensor<T>& iou_estimate, const TrainConfig& config) {
    auto f = focal_loss(g, logits, target, static_cast<T>(config.focal_gamma), static_cast<T>(config.focal_alpha));
    auto d = dice_loss(g, logits, target, static_cast<T>(config.dice_smooth));
    LossTerms<T> out;
    out.focal = static_cast<double>(f.item());
    out.dice = static_cast<double>(d.item());
    auto total = g.add(g.scale(f, static_cast<T>(config.focal_weight)), g.scale(d, static_cast<T>(config.dice_weight)));
    if (config.iou_weight > 0 && iou_estimate.defined()) {
        const T truth = static_cast<T>(binary_iou(logits.data(), target));
        auto diff = g.add_scalar(g.reshape(iou_estimate, {1}), -truth);
        auto sq = g.mul(diff, diff);
        out.iou = static_cast<double>(sq.item());
        total = g.add(total, g.scale(sq, static_cast<T>(config.iou_weight)));
    }
    out.total = total;
    return out;
}

// ---------------------------------------------------------------------------
// AdamW

template <typename T>
AdamW<T>::AdamW(double lr_encoder, double lr_other, double beta1, double beta2, double eps, double weight_decay)
    : lr_encoder_(lr_encoder), lr_other_(lr_other), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

template <typename T>
void AdamW<T>::step(std::vector<NamedParam<T>>& params) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    if (m_.size() != params.size()) fail(ErrorKind::state, "AdamW: parameter list changed between steps");
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (T x : p.tensor.grad()) {
            if (!std::isfinite(static_cast<double>(x))) {
                fail(ErrorKind::numeric, "AdamW: non-finite gradient in parameter " + p.name);
            }
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        const double lr = this->lr(p.group);
        auto w = p.tensor.data();
        const bool has = p.tensor.has_grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? static_cast<double>(p.tensor.grad()[i]) : 0.0;
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            double x = static_cast<double>(w[i]);
            x -= lr * wd_ * x;
            x -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            w[i] = static_cast<T>(x);
        }
    }
}

// ---------------------------------------------------------------------------
// prompts, samples, augmentation

BoundingBox2D simulate_box_prompt(const Mask2D& mask, int slice_index, std::mt19937_64& rng, int jitter_min,
                                  int jitter_max) {
    if (jitter_max < jitter_min) fail(ErrorKind::usage, "simulate_box_prompt: jitter_max < jitter_min");
    auto b = tight_box(mask, slice_index);
    std::uniform_int_distribution<int> j(jitter_min, jitter_max);
    const int dx0 = j(rng), dy0 = j(rng), dx1 = j(rng), dy1 = j(rng);
    BoundingBox2D out = b;
    out.x_min = std::clamp(b.x_min - dx0, 0, mask.nx - 1);
    out.y_min = std::clamp(b.y_min - dy0, 0, mask.ny - 1);
    out.x_max = std::clamp(b.x_max + dx1, 1, mask.nx);
    out.y_max = std::clamp(b.y_max + dy1, 1, mask.ny);
    // inward jitter can cross over; fall back to a one-pixel extent
    if (out.x_max <= out.x_min) out.x_max = std::min(out.x_min + 1, mask.nx), out.x_min = out.x_max - 1;
    if (out.y_max <= out.y_min) out.y_max = std::min(out.y_min + 1, mask.ny), out.y_min = out.y_max - 1;
    return out;
}

TrainSample temporal_subsample(const TrainSample& sample, int stride) {
    if (stride < 1) fail(ErrorKind::usage, "temporal_subsample: stride must be >= 1");
    TrainSample out;
    out.modality = sample.modality;
    const std::size_t n = sample.frames.size() / static_cast<std::size_t>(stride);
    for (std::size_t i = 0; i < n; ++i) {
        out.frames.push_back(sample.frames[i * stride]);
        out.masks.push_back(sample.masks[i * stride]);
    }
    return out;
}

namespace {

double bilinear_at(const Image2D& im, double x, double y) {
    x = std::clamp(x, 0.0, im.nx - 1.0);
    y = std::clamp(y, 0.0, im.ny - 1.0);
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, im.nx - 1), y1 = std::min(y0 + 1, im.ny - 1);
    const double fx = x - x0, fy = y - y0;
    return (1 - fy) * ((1 - fx) * im.at(x0, y0) + fx * im.at(x1, y0)) + fy * ((1 - fx) * im.at(x0, y1) + fx * im.at(x1, y1));
}

}  // namespace

TrainSample augment(const TrainSample& sample, const AugmentConfig& config, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    TrainSample out = sample;
    if (out.frames.empty()) return out;
    const int nx = out.frames[0].nx, ny = out.frames[0].ny;

    if (u01(rng) < config.flip_probability) {
        for (auto& f : out.frames) {
            for (int y = 0; y < ny; ++y) {
                auto row = f.values.begin() + static_cast<std::ptrdiff_t>(y) * nx;
                std::reverse(row, row + nx);
            }
        }
        for (auto& m : out.masks) {
            for (int y = 0; y < ny; ++y) {
                auto row = m.labels.begin() + static_cast<std::ptrdiff_t>(y) * nx;
                std::reverse(row, row + nx);
            }
        }
    }

    if (u01(rng) < config.affine_probability) {
        const double theta = (2 * u01(rng) - 1) * config.max_rotation_deg * std::numbers::pi / 180.0;
        const double scale = config.min_scale + u01(rng) * (config.max_scale - config.min_scale);
        const double tx = (2 * u01(rng) - 1) * config.max_translation * nx;
        const double ty = (2 * u01(rng) - 1) * config.max_translation * ny;
        const double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0;
        const double c = std::cos(theta), s = std::sin(theta);
        // output pixel -> source position (inverse of rotate/scale/translate)
        auto source = [&](int x, int y) {
            const double dx = (x - cx - tx) / scale, dy = (y - cy - ty) / scale;
            return std::pair{c * dx + s * dy + cx, -s * dx + c * dy + cy};
        };
        for (auto& f : out.frames) {
            Image2D src = f;
            for (int y = 0; y < ny; ++y) {
                for (int x = 0; x < nx; ++x) {
                    auto [sx, sy] = source(x, y);
                    f.values[static_cast<std::size_t>(y) * nx + x] = bilinear_at(src, sx, sy);
                }
            }
        }
        for (auto& m : out.masks) {
            Mask2D src = m;
            for (int y = 0; y < ny; ++y) {
                for (int x = 0; x < nx; ++x) {
                    auto [sx, sy] = source(x, y);
                    const int ix = static_cast<int>(std::lround(sx)), iy = static_cast<int>(std::lround(sy));
                    m.at(x, y) = (ix >= 0 && iy >= 0 && ix < nx && iy < ny) ? src.at(ix, iy) : 0;
                }
            }
        }
    }

    if (u01(rng) < config.color_probability) {
        const double contrast = 1.0 + (2 * u01(rng) - 1) * config.contrast;
        const double brightness = 1.0 + (2 * u01(rng) - 1) * config.brightness;
        double mean = 0.0;
        std::size_t count = 0;
        for (const auto& f : out.frames) {
            for (double v : f.values) mean += v;
            count += f.values.size();
        }
        mean /= static_cast<double>(count);
        for (auto& f : out.frames) {
            for (double& v : f.values) v = std::clamp(((v - mean) * contrast + mean) * brightness, 0.0, 255.0);
        }
    }
    // grayscale conversion: frames are single-channel, nothing to do
    (void)config.grayscale_probability;
    return out;
}

TrainSample draw_sample(const TrainItem& item, int frames, std::mt19937_64& rng) {
    auto bin = item.mask.binary(item.object_id);
    const auto extent = z_extent(bin);
    std::uniform_int_distribution<int> start_d(extent.top, extent.bottom);
    int z = start_d(rng);
    int dir = 1;
    if (item.is_video) {
        // clips are first-frame anchored: leave room for forward frames
        z = std::uniform_int_distribution<int>(extent.top, std::max(extent.top, extent.bottom - frames + 1))(rng);
    } else {
        dir = std::uniform_int_distribution<int>(0, 1)(rng) ? 1 : -1;
    }
    TrainSample s;
    s.modality = item.modality;
    for (int k = 0; k < frames && extent.contains(z); ++k, z += dir) {
        s.frames.push_back(extract_slice(item.volume, z));
        s.masks.push_back(extract_slice(bin, z));
    }
    return s;
}

WeightedSampler::WeightedSampler(const std::vector<std::string>& modalities,
                                 const std::map<std::string, double>& weights) {
    if (modalities.empty()) fail(ErrorKind::usage, "WeightedSampler: empty dataset");
    std::vector<double> w;
    double total = 0;
    for (const auto& m : modalities) {
        auto it = weights.find(m);
        if (it == weights.end()) fail(ErrorKind::usage, "WeightedSampler: no sampling weight for modality '" + m + "'");
        w.push_back(it->second);
        total += it->second;
    }
    if (!(total > 0)) fail(ErrorKind::usage, "WeightedSampler: all sampling weights are zero");
    for (double x : w) probs_.push_back(x / total);
    dist_ = std::discrete_distribution<int>(w.begin(), w.end());
}

int WeightedSampler::next(std::mt19937_64& rng) { return dist_(rng); }

// ---------------------------------------------------------------------------
// training loop

std::string loss_log_csv(const std::vector<LossRecord>& log) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,step,focal,dice,total\n";
    for (const auto& r : log) os << r.epoch << ',' << r.step << ',' << r.focal << ',' << r.dice << ',' << r.total << '\n';
    return os.str();
}

template <typename T>
LossRecord accumulate_sample(Model<T>& model, const TrainSample& sample, const TrainConfig& config,
                             std::mt19937_64& rng) {
    if (sample.frames.empty()) fail(ErrorKind::usage, "accumulate_sample: empty sample");
    Graph<T> g;
    MemoryBank<T> bank(model.config().memory_capacity);
    Prompt prompt;
    prompt.box = simulate_box_prompt(sample.masks[0], 0, rng, config.box_jitter_min, config.box_jitter_max);
    Tensor<T> total;
    LossRecord rec;
    for (std::size_t f = 0; f < sample.frames.size(); ++f) {
        auto out = model.forward_frame(g, sample.frames[f], bank, f == 0 ? &prompt : nullptr, static_cast<int>(f));
        std::vector<T> target(sample.masks[f].labels.size());
        for (std::size_t i = 0; i < target.size(); ++i) target[i] = sample.masks[f].labels[i] ? T(1) : T(0);
        auto terms = total_loss(g, out.decoded.logits, target, out.decoded.iou, config);
        total = total.defined() ? g.add(total, terms.total) : terms.total;
        rec.focal += terms.focal;
        rec.dice += terms.dice;
        bank.insert(std::move(out.entry));
    }
    rec.total = static_cast<double>(total.item());
    g.backward(total);
    return rec;
}

namespace {

TrainSample prepare_sample(const TrainItem& item, const TrainConfig& config, std::mt19937_64& rng) {
    int stride = 1;
    if (item.is_video && !config.augment.temporal_strides.empty()) {
        const auto& s = config.augment.temporal_strides;
        stride = s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)];
    }
    auto sample = draw_sample(item, config.frames_per_sample * stride, rng);
    if (stride > 1 && sample.frames.size() >= static_cast<std::size_t>(stride)) {
        sample = temporal_subsample(sample, stride);
    }
    auto aug = augment(sample, config.augment, rng);
    // keep the prompt frame segmentable
    if (aug.masks[0].foreground_count() == 0) return sample;
    return aug;
}

}  // namespace

TrainItem fit_to_input(const TrainItem& item, int size) {
    const auto& d = item.volume.dims();
    if (d.nx == size && d.ny == size) return item;
    const auto& s = item.volume.spacing();
    const Spacing sp{s.sx * d.nx / size, s.sy * d.ny / size, s.sz};
    TrainItem out = item;
    out.volume = resample(item.volume, {size, size, d.nz}, sp);
    for (double& v : out.volume.values()) v = std::clamp(v, 0.0, 255.0);
    out.mask = resample(item.mask, {size, size, d.nz}, sp);
    return out;
}

std::vector<LossRecord> train(Model<float>& model, const std::vector<TrainItem>& dataset, const TrainConfig& config,
                              const EpochCallback& on_epoch) {
    config.validate();
    if (dataset.empty()) fail(ErrorKind::usage, "train: empty dataset");
    const int size = model.config().input_size;
    std::vector<TrainItem> fitted;
    for (const auto& it : dataset) {
        if (it.volume.dims().nx != size || it.volume.dims().ny != size) {
            for (const auto& x : dataset) fitted.push_back(fit_to_input(x, size));
            break;
        }
    }
    const auto& data = fitted.empty() ? dataset : fitted;
    std::vector<std::string> modalities;
    for (const auto& it : data) modalities.push_back(it.modality);
    WeightedSampler sampler(modalities, config.modality_sampling);
    std::mt19937_64 rng(config.seed);
    auto opt = AdamW<float>::from(config);
    const int per_epoch = config.samples_per_epoch > 0 ? config.samples_per_epoch : static_cast<int>(data.size());
    std::vector<LossRecord> log;
    int step = 0;
    model.zero_grad();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        LossRecord acc;
        int in_batch = 0;
        for (int s = 0; s < per_epoch; ++s) {
            const auto& item = data[static_cast<std::size_t>(sampler.next(rng))];
            auto sample = prepare_sample(item, config, rng);
            auto r = accumulate_sample(model, sample, config, rng);
            acc.focal += r.focal;
            acc.dice += r.dice;
            acc.total += r.total;
            if (++in_batch == config.batch_size || s + 1 == per_epoch) {
                opt.step(model.params());
                model.zero_grad();
                acc.epoch = epoch;
                acc.step = step++;
                log.push_back(acc);
                acc = {};
                in_batch = 0;
            }
        }
        if (on_epoch) on_epoch(epoch, log);
    }
    return log;
}

RoundSchedule RoundSchedule::for_round(int round) {
    if (round == 2) return {2, 6, 0.5};
    if (round == 3) return {3, 15, 0.5};
    fail(ErrorKind::usage, "no fine-tune schedule for round " + std::to_string(round) + " (rounds 2 and 3 only)");
}

std::vector<LossRecord> fine_tune(Model<float>& model, const std::vector<TrainItem>& dataset,
                                  const RoundSchedule& schedule, TrainConfig base, const std::string& checkpoint_dir) {
    if (dataset.empty()) fail(ErrorKind::usage, "fine_tune: empty dataset");
    base.lr_encoder *= schedule.lr_factor;
    base.lr_other *= schedule.lr_factor;
    base.epochs = schedule.epochs;
    EpochCallback cb;
    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
        cb = [&](int epoch, const std::vector<LossRecord>&) {
            save_checkpoint(checkpoint_dir + "/round" + std::to_string(schedule.round) + "_epoch" +
                                std::to_string(epoch + 1) + ".ckpt",
                            model);
        };
    }
    return train(model, dataset, base, cb);
}

// ---------------------------------------------------------------------------
// manifests

namespace {

// Line number of each top-level array element's opening brace.
std::vector<int> element_lines(const std::string& text) {
    std::vector<int> lines;
    int line = 1, depth = 0;
    bool in_str = false, esc = false;
    for (char ch : text) {
        if (ch == '\n') ++line;
        if (in_str) {
            if (esc) esc = false;
            else if (ch == '\\') esc = true;
            else if (ch == '"') in_str = false;
            continue;
        }
        if (ch == '"') in_str = true;
        else if (ch == '[' || ch == '{') {
            if (depth == 1 && ch == '{') lines.push_back(line);
            ++depth;
        } else if (ch == ']' || ch == '}') --depth;
    }
    return lines;
}

int line_of_offset(const std::string& text, std::size_t offset) {
    return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(offset, text.size())), '\n'));
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    const auto bytes = read_file(path);
    const std::string text(bytes.begin(), bytes.end());
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path + ":" + std::to_string(line_of_offset(text, e.byte)) + ": " + e.what());
    }
    if (!j.is_array()) fail(ErrorKind::format, path + ":1: manifest must be a JSON list");
    const auto lines = element_lines(text);
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return (fp.is_absolute() || base.empty() ? fp : base / fp).string();
    };
    std::vector<ManifestEntry> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const int line = i < lines.size() ? lines[i] : 1;
        const auto where = path + ":" + std::to_string(line) + ": entry " + std::to_string(i);
        const auto& e = j[i];
        if (!e.is_object()) fail(ErrorKind::format, where + " is not an object");
        for (const char* key : {"volume_path", "mask_path", "modality"}) {
            if (!e.contains(key) || !e[key].is_string()) fail(ErrorKind::format, where + ": missing string field '" + key + "'");
        }
        ManifestEntry m;
        m.volume_path = resolve(e["volume_path"].get<std::string>());
        m.mask_path = resolve(e["mask_path"].get<std::string>());
        m.modality = e["modality"].get<std::string>();
        if (e.contains("object_id")) {
            if (!e["object_id"].is_number_integer() || e["object_id"].get<int>() < 1 || e["object_id"].get<int>() > 255) {
                fail(ErrorKind::format, where + ": object_id must be an integer in [1, 255]");
            }
            m.object_id = e["object_id"].get<int>();
        }
        out.push_back(std::move(m));
    }
    return out;
}

std::string write_manifest(const std::vector<ManifestEntry>& entries) {
    json j = json::array();
    for (const auto& e : entries) {
        j.push_back({{"volume_path", e.volume_path},
                     {"mask_path", e.mask_path},
                     {"modality", e.modality},
                     {"object_id", e.object_id}});
    }
    return j.dump(2) + "\n";
}

std::vector<TrainItem> load_items(const std::vector<ManifestEntry>& entries) {
    std::vector<TrainItem> items;
    for (const auto& e : entries) {
        TrainItem it;
        it.volume = load_volume(e.volume_path);
        it.mask = load_mask(e.mask_path);
        if (it.mask.dims() != it.volume.dims()) {
            fail(ErrorKind::shape, "mask " + e.mask_path + " does not match volume " + e.volume_path);
        }
        if (it.mask.count(e.object_id) == 0) {
            fail(ErrorKind::usage, "mask " + e.mask_path + " has no voxels with label " + std::to_string(e.object_id));
        }
        it.object_id = e.object_id;
        it.modality = e.modality;
        it.is_video = e.modality == "video";
        items.push_back(std::move(it));
    }
    return items;
}

// ---------------------------------------------------------------------------
// synthetic data

namespace {

struct Blob {
    double cx, cy, cz, rx, ry, rz, angle, level;
};

double blob_distance(const Blob& b, double x, double y, double z) {
    const double dx = x - b.cx, dy = y - b.cy;
    const double c = std::cos(b.angle), s = std::sin(b.angle);
    const double u = (c * dx + s * dy) / b.rx, v = (-s * dx + c * dy) / b.ry, w = (z - b.cz) / b.rz;
    return u * u + v * v + w * w;
}

}  // namespace

SyntheticCase make_synthetic_volume(const SyntheticConfig& config, std::mt19937_64& rng) {
    const auto d = config.dims;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

    auto make_blob = [&](double level) {
        Blob b{};
        const double r_cap = std::min(d.nx, d.ny) / 2.0 - 3.0;
        if (config.shape == SyntheticShape::sphere) {
            const double zcap = (d.nz / 2.0 - 1.0) * config.spacing.sz / config.spacing.sx;
            const double r = uniform(config.min_radius, std::max(config.min_radius, std::min({config.max_radius, r_cap, zcap})));
            b.rx = b.ry = r;
            b.rz = r * config.spacing.sx / config.spacing.sz;
            b.angle = 0.0;
        } else {
            b.rx = uniform(config.min_radius, std::min(config.max_radius, r_cap));
            b.ry = uniform(config.min_radius, std::min(config.max_radius, r_cap));
            b.rz = uniform(config.min_radius_z, std::min(config.max_radius_z, d.nz / 2.0 - 1.0));
            b.angle = uniform(0.0, std::numbers::pi);
        }
        const double rmax = std::max(b.rx, b.ry);
        b.cx = uniform(rmax + 1.0, d.nx - rmax - 2.0);
        b.cy = uniform(rmax + 1.0, d.ny - rmax - 2.0);
        b.cz = uniform(b.rz, d.nz - 1.0 - b.rz);
        b.level = level;
        return b;
    };

    const double bg = config.background + uniform(-config.intensity_spread, config.intensity_spread) / 2.0;
    Blob target = make_blob(config.foreground + uniform(-config.intensity_spread, config.intensity_spread));
    std::vector<Blob> others;
    for (int k = 0, tries = 0; k < config.distractors && tries < 200; ++tries) {
        Blob o = make_blob(config.foreground + uniform(-config.intensity_spread, config.intensity_spread));
        o.rx *= 0.7;
        o.ry *= 0.7;
        const double gap = std::hypot(o.cx - target.cx, o.cy - target.cy);
        if (gap < std::max(target.rx, target.ry) + std::max(o.rx, o.ry) + 3.0) continue;
        bool clash = false;
        for (const auto& p : others) clash = clash || std::hypot(o.cx - p.cx, o.cy - p.cy) < std::max(p.rx, p.ry) + std::max(o.rx, o.ry) + 2.0;
        if (clash) continue;
        others.push_back(o);
        ++k;
    }

    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    SyntheticCase out;
    out.volume = VoxelGrid(d, config.spacing, IntensityKind::normalized_0_255);
    out.mask = LabelMask(d, config.spacing);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                double v = bg;
                const double r2 = blob_distance(target, x, y, z);
                if (r2 <= 1.0) {
                    v = target.level * (1.0 - 0.15 * r2) + bg * 0.15 * r2;
                    out.mask.at(x, y, z) = 1;
                }
                for (const auto& o : others) {
                    const double q2 = blob_distance(o, x, y, z);
                    if (q2 <= 1.0) v = o.level * (1.0 - 0.15 * q2) + bg * 0.15 * q2;
                }
                out.volume.at(x, y, z) = std::clamp(v + noise(rng), 0.0, 255.0);
            }
        }
    }
    if (out.mask.foreground_count() == 0) {
        // degenerate draw (thin ellipsoid between voxel centres): mark the centre
        out.mask.at(static_cast<int>(std::lround(target.cx)), static_cast<int>(std::lround(target.cy)),
                    static_cast<int>(std::lround(target.cz))) = 1;
    }
    return out;
}

SyntheticCase make_synthetic_video(int size, int frames, std::mt19937_64& rng, double noise_sigma) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    const Dims d{size, size, frames};
    const double r0 = uniform(size * 0.12, size * 0.2);
    double cx = uniform(r0 + 2, size - r0 - 3), cy = uniform(r0 + 2, size - r0 - 3);
    double vx = uniform(-1.0, 1.0), vy = uniform(-1.0, 1.0);
    const double phase = uniform(0.0, 2 * std::numbers::pi);
    const double level = uniform(150, 210), bg = uniform(30, 70);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    SyntheticCase out;
    out.volume = VoxelGrid(d, {1.0, 1.0, 1.0}, IntensityKind::normalized_0_255);
    out.mask = LabelMask(d, {1.0, 1.0, 1.0});
    for (int t = 0; t < frames; ++t) {
        const double rx = r0 * (1.0 + 0.15 * std::sin(phase + 0.3 * t));
        const double ry = r0 * (1.0 - 0.1 * std::sin(phase + 0.2 * t));
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double u = (x - cx) / rx, v = (y - cy) / ry;
                const bool in = u * u + v * v <= 1.0;
                out.mask.at(x, y, t) = in ? 1 : 0;
                out.volume.at(x, y, t) = std::clamp((in ? level : bg) + noise(rng), 0.0, 255.0);
            }
        }
        cx += vx;
        cy += vy;
        if (cx < rx + 1 || cx > size - rx - 2) vx = -vx, cx += 2 * vx;
        if (cy < ry + 1 || cy > size - ry - 2) vy = -vy, cy += 2 * vy;
    }
    return out;
}

#define PSEG_INSTANTIATE(T)                                                                                       \
    template Tensor<T> focal_loss<T>(Graph<T>&, const Tensor<T>&, const std::vector<T>&, T, T);                 \
    template Tensor<T> dice_loss<T>(Graph<T>&, const Tensor<T>&, const std::vector<T>&, T);                     \
    template LossTerms<T> total_loss<T>(Graph<T>&, const Tensor<T>&, const std::vector<T>&, const Tensor<T>&,   \
                                        const TrainConfig&);                                                    \
    template double binary_iou<T>(std::span<const T>, const std::vector<T>&);                                   \
    template class AdamW<T>;                                                                                    \
    template LossRecord accumulate_sample<T>(Model<T>&, const TrainSample&, const TrainConfig&, std::mt19937_64&);

PSEG_INSTANTIATE(float)
PSEG_INSTANTIATE(double)
#undef PSEG_INSTANTIATE

}  // namespace pseg
