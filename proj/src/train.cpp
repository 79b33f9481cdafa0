#include "gqkva/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <ostream>

#include "json.hpp"

namespace gqkva {

namespace {

constexpr double kPi = 3.14159265358979323846;

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Tensor gather_rows(const Tensor& images, std::span<const int64_t> indices) {
    Shape out_shape = images.shape();
    out_shape[0] = static_cast<int64_t>(indices.size());
    Tensor out = Tensor::zeros(out_shape, images.dtype());
    const int64_t row = images.numel() / images.dim(0);
    for (size_t i = 0; i < indices.size(); ++i) {
        for (int64_t j = 0; j < row; ++j) {
            out.set(static_cast<int64_t>(i) * row + j, images.get(indices[i] * row + j));
        }
    }
    return out;
}

}  // namespace

void TrainHyper::validate() const {
    if (lr < 0.0) throw ConfigError("train: lr must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("train: betas must lie in [0, 1)");
    }
    if (eps <= 0.0) throw ConfigError("train: eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
}

double TrainHyper::lr_at(int64_t step) const {
    if (schedule == Schedule::Constant) return lr;
    const double t = static_cast<double>(step - 1) / static_cast<double>(steps);
    return lr * 0.5 * (1.0 + std::cos(kPi * t));
}

CrossEntropyResult cross_entropy(const Tensor& logits, std::span<const int64_t> labels) {
    if (logits.ndim() != 2) {
        throw DimensionError("cross_entropy: logits must be [B, C], got " +
                             shape_str(logits.shape()));
    }
    const int64_t b = logits.dim(0), c = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != b) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(b));
    }
    for (int64_t label : labels) {
        if (label < 0 || label >= c) {
            throw ConfigError("cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(c) + ")");
        }
    }
    CrossEntropyResult result;
    result.dlogits = Tensor::zeros(logits.shape(), logits.dtype());
    double loss = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        double mx = logits.get(i * c);
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, logits.get(i * c + j));
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(logits.get(i * c + j) - mx);
        const double log_z = mx + std::log(sum);
        loss += log_z - logits.get(i * c + labels[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < c; ++j) {
            double p = std::exp(logits.get(i * c + j) - log_z);
            double target = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
            result.dlogits.set(i * c + j, (p - target) / static_cast<double>(b));
        }
    }
    result.loss = loss / static_cast<double>(b);
    return result;
}

void adamw_step(std::span<Tensor* const> weights, std::span<const Tensor* const> grads,
                std::span<const char> decay, AdamWState& state, const TrainHyper& hyper,
                double lr) {
    if (weights.size() != grads.size() || weights.size() != decay.size()) {
        throw DimensionError("adamw_step: weights/grads/decay sizes differ");
    }
    if (state.m.empty()) {
        for (const Tensor* w : weights) {
            state.m.push_back(Tensor::zeros(w->shape(), w->dtype()));
            state.v.push_back(Tensor::zeros(w->shape(), w->dtype()));
        }
    }
    if (state.m.size() != weights.size()) {
        throw DimensionError("adamw_step: optimizer state does not match parameter count");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < weights.size(); ++p) {
        Tensor& w = *weights[p];
        const Tensor& g = *grads[p];
        if (w.shape() != g.shape()) {
            throw DimensionError("adamw_step: grad shape " + shape_str(g.shape()) +
                                 " does not match weight " + shape_str(w.shape()));
        }
        Tensor& m = state.m[p];
        Tensor& v = state.v[p];
        const int64_t n = w.numel();
        for (int64_t i = 0; i < n; ++i) {
            double wi = w.get(i);
            if (decay[p]) wi -= lr * hyper.weight_decay * wi;
            const double gi = g.get(i);
            const double mi = hyper.beta1 * m.get(i) + (1.0 - hyper.beta1) * gi;
            const double vi = hyper.beta2 * v.get(i) + (1.0 - hyper.beta2) * gi * gi;
            m.set(i, mi);
            v.set(i, vi);
            wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + hyper.eps);
            w.set(i, wi);
        }
    }
}

Dataset synth_dataset(uint64_t seed, int64_t n_samples, int64_t image_size, int64_t classes,
                      int64_t channels) {
    if (classes < 2) throw ConfigError("synth_dataset: classes must be >= 2");
    if (n_samples < classes * 2 || image_size < 2 || channels < 1) {
        throw ConfigError("synth_dataset: degenerate sizes");
    }
    Rng rng(seed);
    Tensor images = Tensor::zeros({n_samples, channels, image_size, image_size}, DType::F32);
    std::vector<int64_t> labels(static_cast<size_t>(n_samples));
    const int64_t pix = channels * image_size * image_size;
    for (int64_t i = 0; i < n_samples; ++i) {
        const int64_t cls = i % classes;
        labels[static_cast<size_t>(i)] = cls;
        const double theta = kPi * static_cast<double>(cls) / static_cast<double>(classes);
        const double freq = 2.0 + static_cast<double>(cls % 3);
        const double amp = 0.7 + 0.6 * rng.uniform();
        const double cos_t = std::cos(theta), sin_t = std::sin(theta);
        for (int64_t ch = 0; ch < channels; ++ch) {
            for (int64_t y = 0; y < image_size; ++y) {
                for (int64_t x = 0; x < image_size; ++x) {
                    const double u = static_cast<double>(x) / static_cast<double>(image_size);
                    const double v = static_cast<double>(y) / static_cast<double>(image_size);
                    const double wave =
                        amp * std::sin(2.0 * kPi * freq * (u * cos_t + v * sin_t));
                    const double noise = 0.3 * rng.normal();
                    images.set(i * pix + ch * image_size * image_size + y * image_size + x,
                               wave + noise);
                }
            }
        }
    }
    const int64_t n_train = (n_samples * 9) / 10;
    Dataset data;
    data.classes = classes;
    std::vector<int64_t> train_idx, val_idx;
    for (int64_t i = 0; i < n_train; ++i) train_idx.push_back(i);
    for (int64_t i = n_train; i < n_samples; ++i) val_idx.push_back(i);
    data.train_images = gather_rows(images, train_idx);
    data.val_images = gather_rows(images, val_idx);
    data.train_labels.assign(labels.begin(), labels.begin() + n_train);
    data.val_labels.assign(labels.begin() + n_train, labels.end());
    return data;
}

double linear_probe_accuracy(const Dataset& data, int iterations, double lr) {
    const int64_t n = data.train_images.dim(0);
    const int64_t pix = data.train_images.numel() / n;
    const int64_t c = data.classes;
    std::vector<double> w(static_cast<size_t>(pix * c), 0.0);
    std::vector<double> b(static_cast<size_t>(c), 0.0);
    std::vector<double> logits(static_cast<size_t>(c));
    std::vector<double> dw(static_cast<size_t>(pix * c));
    std::vector<double> db(static_cast<size_t>(c));
    for (int it = 0; it < iterations; ++it) {
        std::fill(dw.begin(), dw.end(), 0.0);
        std::fill(db.begin(), db.end(), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < c; ++j) {
                double z = b[static_cast<size_t>(j)];
                for (int64_t k = 0; k < pix; ++k) {
                    z += data.train_images.get(i * pix + k) * w[static_cast<size_t>(k * c + j)];
                }
                logits[static_cast<size_t>(j)] = z;
            }
            double mx = logits[0];
            for (int64_t j = 1; j < c; ++j) mx = std::max(mx, logits[static_cast<size_t>(j)]);
            double sum = 0.0;
            for (int64_t j = 0; j < c; ++j) sum += std::exp(logits[static_cast<size_t>(j)] - mx);
            for (int64_t j = 0; j < c; ++j) {
                const double p = std::exp(logits[static_cast<size_t>(j)] - mx) / sum;
                const double target =
                    (j == data.train_labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                const double err = (p - target) / static_cast<double>(n);
                db[static_cast<size_t>(j)] += err;
                for (int64_t k = 0; k < pix; ++k) {
                    dw[static_cast<size_t>(k * c + j)] += err * data.train_images.get(i * pix + k);
                }
            }
        }
        for (size_t k = 0; k < w.size(); ++k) w[k] -= lr * dw[k];
        for (size_t j = 0; j < b.size(); ++j) b[j] -= lr * db[j];
    }
    const int64_t nv = data.val_images.dim(0);
    int64_t correct = 0;
    for (int64_t i = 0; i < nv; ++i) {
        int64_t best = 0;
        double best_z = -1e300;
        for (int64_t j = 0; j < c; ++j) {
            double z = b[static_cast<size_t>(j)];
            for (int64_t k = 0; k < pix; ++k) {
                z += data.val_images.get(i * pix + k) * w[static_cast<size_t>(k * c + j)];
            }
            if (z > best_z) {
                best_z = z;
                best = j;
            }
        }
        if (best == data.val_labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(nv);
}

double evaluate_accuracy(const ViTConfig& cfg, const ViTWeights& w, const Tensor& images,
                         std::span<const int64_t> labels, int64_t batch_size) {
    const int64_t n = images.dim(0);
    int64_t correct = 0;
    for (int64_t begin = 0; begin < n; begin += batch_size) {
        const int64_t count = std::min(batch_size, n - begin);
        std::vector<int64_t> idx(static_cast<size_t>(count));
        for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = begin + i;
        Tensor batch = gather_rows(images, idx).astype(w.patch_w.dtype());
        Tensor logits = vit_logits(cfg, w, batch);
        const int64_t c = logits.dim(1);
        for (int64_t i = 0; i < count; ++i) {
            int64_t best = 0;
            double best_z = logits.get(i * c);
            for (int64_t j = 1; j < c; ++j) {
                if (logits.get(i * c + j) > best_z) {
                    best_z = logits.get(i * c + j);
                    best = j;
                }
            }
            if (best == labels[static_cast<size_t>(begin + i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

TrainLog train_loop(const ViTConfig& cfg, const TrainHyper& hyper, const Dataset& data,
                    ViTWeights& weights, std::ostream* log_stream,
                    double stop_at_val_accuracy) {
    cfg.validate();
    hyper.validate();
    if (data.classes != cfg.num_classes) {
        throw ConfigError("train_loop: dataset has " + std::to_string(data.classes) +
                          " classes, model expects " + std::to_string(cfg.num_classes));
    }

    std::vector<Tensor*> params;
    std::vector<char> decay;
    weights.for_each([&](const std::string&, Tensor& t, ParamKind kind) {
        params.push_back(&t);
        decay.push_back(kind == ParamKind::Projection ? 1 : 0);
    });
    AdamWState state;

    TrainLog log;
    const int64_t n_train = data.train_images.dim(0);
    const DType dtype = weights.patch_w.dtype();
    int64_t step = 0;
    int64_t epoch = 0;
    bool stopped = false;

    auto emit = [&](const nlohmann::json& j) {
        if (log_stream) (*log_stream) << j.dump() << "\n";
    };

    while (step < hyper.steps && !stopped) {
        epoch += 1;
        Rng shuffle_rng(hyper.seed ^ (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(epoch)));
        std::vector<int64_t> order = shuffle_rng.permutation(n_train);
        for (int64_t begin = 0; begin < n_train && step < hyper.steps; begin += hyper.batch_size) {
            const int64_t count = std::min(hyper.batch_size, n_train - begin);
            std::vector<int64_t> idx(order.begin() + begin, order.begin() + begin + count);
            std::vector<int64_t> batch_labels(static_cast<size_t>(count));
            for (int64_t i = 0; i < count; ++i) {
                batch_labels[static_cast<size_t>(i)] =
                    data.train_labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            }
            step += 1;
            const double t0 = now_ms();
            const double lr_now = hyper.lr_at(step);
            double loss;
            try {
                Tensor batch = gather_rows(data.train_images, idx).astype(dtype);
                Tape tape;
                Tape::Id img = tape.leaf(batch, false);
                ViTLeaves leaves = register_vit_weights(tape, weights, true);
                Tape::Id logits = vit_forward(tape, cfg, leaves, img);
                CrossEntropyResult ce = cross_entropy(tape.value(logits), batch_labels);
                loss = ce.loss;
                if (!std::isfinite(loss)) {
                    throw TrainingDiverged(step, "training diverged at step " +
                                                     std::to_string(step) +
                                                     ": non-finite loss");
                }
                tape.backward(logits, ce.dlogits);
                std::vector<Tape::Id> leaf_ids = leaves.all();
                std::vector<Tensor> grads;
                grads.reserve(leaf_ids.size());
                for (Tape::Id id : leaf_ids) grads.push_back(tape.value_and_grad(id).grad);
                std::vector<const Tensor*> grad_ptrs;
                grad_ptrs.reserve(grads.size());
                for (const Tensor& g : grads) grad_ptrs.push_back(&g);
                adamw_step(params, grad_ptrs, decay, state, hyper, lr_now);
            } catch (const NumericError& e) {
                throw TrainingDiverged(step, "training diverged at step " +
                                                 std::to_string(step) + ": " + e.what());
            }
            const double ms = now_ms() - t0;
            log.steps.push_back({step, loss, lr_now, ms});
            emit({{"type", "step"},
                  {"step", step},
                  {"loss", loss},
                  {"lr", lr_now},
                  {"ms_per_batch", ms}});
        }
        const double acc = evaluate_accuracy(cfg, weights, data.val_images, data.val_labels,
                                             hyper.batch_size);
        log.epochs.push_back({epoch, acc});
        emit({{"type", "epoch"}, {"epoch", epoch}, {"val_accuracy", acc}});
        if (stop_at_val_accuracy >= 0.0 && acc >= stop_at_val_accuracy) stopped = true;
    }
    log.final_val_accuracy =
        log.epochs.empty() ? 0.0 : log.epochs.back().val_accuracy;
    return log;
}

}  // namespace gqkva
