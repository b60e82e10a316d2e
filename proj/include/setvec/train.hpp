#ifndef SETVEC_TRAIN_HPP_
#define SETVEC_TRAIN_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <optional>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "setvec/checkpoint.hpp"
#include "setvec/eval.hpp"
#include "setvec/model.hpp"
#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

struct TrainConfig {
    double lambda1 = 100.0;
    double lambda2 = 0.01;
    double epsilon = 1e-8;       // attention regularizer stabilizer
    double learning_rate = 0.001;
    double beta1 = 0.9, beta2 = 0.999, eps_adam = 1e-8;
    std::size_t epochs = 30;
    std::size_t bags_per_step = 8;
    std::uint64_t rng_seed = 42;
    PoolMode pool = PoolMode::weighted;
    ReconLoss recon = ReconLoss::mse;
    double grad_clip = 0.0;      // global max-norm guard; 0 disables
    double val_fraction = 0.1;   // seeded split when no validation set given
    bool standardize_targets = true;
    std::size_t threads = 0;     // 0 = SETVEC_THREADS env or hardware count
    ModelConfig arch;

    void validate() const {
        if (learning_rate <= 0) throw usage_error("train: learning_rate must be > 0");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw usage_error("train: beta1/beta2 must lie in [0,1)");
        if (lambda1 < 0 || lambda2 < 0) throw usage_error("train: lambdas must be >= 0");
        if (epsilon <= 0) throw usage_error("train: epsilon must be > 0");
        if (epochs < 1) throw usage_error("train: epochs must be >= 1");
        if (bags_per_step < 1) throw usage_error("train: bags_per_step must be >= 1");
        if (val_fraction < 0 || val_fraction >= 1)
            throw usage_error("train: val_fraction must lie in [0,1)");
    }

    LossWeights<double> loss_weights() const { return {lambda1, lambda2, epsilon, recon}; }
};

inline std::size_t resolve_threads(std::size_t configured) {
    if (configured > 0) return configured;
    if (const char* env = std::getenv("SETVEC_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return std::size_t(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

// Trainable tensors in a fixed visit order; parallel param/grad/moment
// containers align position by position.
template <typename S>
std::vector<TensorT<S>*> trainable_list(ModelParamsT<S>& p) {
    std::vector<TensorT<S>*> v;
    for_each_trainable(p, [&](const char*, TensorT<S>& t) { v.push_back(&t); });
    return v;
}

template <typename S>
std::vector<const char*> trainable_names(ModelParamsT<S>& p) {
    std::vector<const char*> v;
    for_each_trainable(p, [&](const char* n, TensorT<S>&) { v.push_back(n); });
    return v;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename S = double>
struct OptimizerStateT {
    ModelParamsT<S> m, v;
    std::uint64_t t = 0;
};

using OptimizerState = OptimizerStateT<double>;

template <typename S>
OptimizerStateT<S> make_optimizer_state(const ModelParamsT<S>& params) {
    return {zeros_like(params), zeros_like(params), 0};
}

// Standard bias-corrected Adam update over every trainable tensor.
template <typename S>
void adam_step(ModelParamsT<S>& params, ModelParamsT<S>& grads, OptimizerStateT<S>& state,
               const TrainConfig& cfg) {
    state.t += 1;
    const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
    const S corr1 = S{1} - S(std::pow(cfg.beta1, double(state.t)));
    const S corr2 = S{1} - S(std::pow(cfg.beta2, double(state.t)));
    const S lr = S(cfg.learning_rate), eps = S(cfg.eps_adam);

    auto ps = trainable_list(params);
    auto gs = trainable_list(grads);
    auto ms = trainable_list(state.m);
    auto vs = trainable_list(state.v);
    auto names = trainable_names(params);
    for (std::size_t k = 0; k < ps.size(); ++k) {
        TensorT<S>& p = *ps[k];
        const TensorT<S>& g = *gs[k];
        TensorT<S>& m = *ms[k];
        TensorT<S>& v = *vs[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const S gi = g[i];
            if (!std::isfinite(gi))
                throw numeric_error(std::string("adam_step: non-finite gradient in ") + names[k]);
            m[i] = b1 * m[i] + (S{1} - b1) * gi;
            v[i] = b2 * v[i] + (S{1} - b2) * gi * gi;
            p[i] -= lr * (m[i] / corr1) / (std::sqrt(v[i] / corr2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct MetricsRecord {
    std::size_t epoch = 0;
    std::uint64_t step = 0;  // cumulative optimizer steps
    double L_d = 0, L_g = 0, R = 0, total = 0;
    std::optional<double> val_r2;

    std::string to_json_line() const {
        char buf[320];
        if (val_r2)
            std::snprintf(buf, sizeof buf,
                          "{\"epoch\":%zu,\"step\":%llu,\"L_d\":%.17g,\"L_g\":%.17g,"
                          "\"R\":%.17g,\"total\":%.17g,\"val_r2\":%.17g}",
                          epoch, static_cast<unsigned long long>(step), L_d, L_g, R, total,
                          *val_r2);
        else
            std::snprintf(buf, sizeof buf,
                          "{\"epoch\":%zu,\"step\":%llu,\"L_d\":%.17g,\"L_g\":%.17g,"
                          "\"R\":%.17g,\"total\":%.17g}",
                          epoch, static_cast<unsigned long long>(step), L_d, L_g, R, total);
        return buf;
    }
};

template <typename S = double>
struct TrainResultT {
    ModelParamsT<S> params;
    OptimizerStateT<S> opt;
    std::vector<MetricsRecord> log;
    bool aborted = false;      // loss went non-finite; params hold the last good state
    std::string abort_reason;
};

using TrainResult = TrainResultT<double>;

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.index(i)]);
}

template <typename S>
double grad_norm(ModelParamsT<S>& grads) {
    double ss = 0;
    for_each_trainable(grads, [&](const char*, TensorT<S>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) ss += double(g[i]) * double(g[i]);
    });
    return std::sqrt(ss);
}

}  // namespace detail

// Joint optimization of the three-term objective over bags. When no
// validation set is supplied and val_fraction > 0, a seeded fraction of the
// training bags is held out for the per-epoch R2 log. Deterministic for a
// fixed seed, config, and thread count: per-bag gradients are reduced in bag
// index order no matter which thread produced them.
template <typename S = double>
TrainResultT<S> train(const std::vector<BagT<S>>& bags, const TrainConfig& cfg,
                      const std::type_identity_t<std::vector<BagT<S>>>* validation = nullptr,
                      const std::type_identity_t<CheckpointT<S>>* resume = nullptr) {
    cfg.validate();
    if (bags.empty()) throw domain_error("train: empty dataset");

    TrainResultT<S> out;
    if (resume) {
        if (!(resume->params.cfg == cfg.arch))
            throw incompat_error("train: resume checkpoint architecture " +
                                 resume->params.cfg.descriptor() + " does not match configured " +
                                 cfg.arch.descriptor());
        out.params = resume->params;
        out.opt.m = resume->adam_m;
        out.opt.v = resume->adam_v;
        out.opt.t = resume->adam_t;
    } else {
        out.params = make_model_params<S>(cfg.arch, cfg.rng_seed);
        out.opt = make_optimizer_state(out.params);
    }

    // validation split
    std::vector<std::size_t> train_idx, val_idx;
    if (validation == nullptr && cfg.val_fraction > 0 && bags.size() >= 10) {
        std::vector<std::size_t> perm(bags.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        Rng split_rng(Rng::derive(cfg.rng_seed, "valsplit"));
        detail::shuffle_indices(perm, split_rng);
        const std::size_t n_val =
            std::max<std::size_t>(1, std::size_t(cfg.val_fraction * double(bags.size())));
        val_idx.assign(perm.begin(), perm.begin() + n_val);
        train_idx.assign(perm.begin() + n_val, perm.end());
        std::sort(val_idx.begin(), val_idx.end());
        std::sort(train_idx.begin(), train_idx.end());
    } else {
        train_idx.resize(bags.size());
        for (std::size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = i;
    }

    // target standardization: the affine un-scaling is folded into the model
    // as calibration, so eval-side predictions stay on the raw scale
    std::vector<S> scaled_y(bags.size());
    if (cfg.standardize_targets && !resume) {
        double mu = 0;
        for (std::size_t i : train_idx) mu += double(bags[i].y);
        mu /= double(train_idx.size());
        double var = 0;
        for (std::size_t i : train_idx) var += (double(bags[i].y) - mu) * (double(bags[i].y) - mu);
        var /= double(train_idx.size());
        const double sigma = std::sqrt(std::max(var, 1e-24));
        out.params.target_affine = TensorT<S>::from({2}, {S(mu), S(sigma)});
    }
    {
        const S mu = out.params.target_affine[0], sigma = out.params.target_affine[1];
        for (std::size_t i = 0; i < bags.size(); ++i) scaled_y[i] = (bags[i].y - mu) / sigma;
    }

    const LossWeights<S> lw{S(cfg.lambda1), S(cfg.lambda2), S(cfg.epsilon), cfg.recon};
    const std::size_t n_threads = std::min<std::size_t>(
        resolve_threads(cfg.threads), std::max<std::size_t>(1, cfg.bags_per_step));
    ModelT<S> model(out.params);
    ModelParamsT<S> last_good = model.params();
    OptimizerStateT<S> last_good_opt = out.opt;
    Rng shuffle_rng(Rng::derive(cfg.rng_seed, "shuffle"));

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        detail::shuffle_indices(order, shuffle_rng);

        MetricsRecord rec;
        rec.epoch = epoch;
        std::size_t n_bags_seen = 0;
        try {
            for (std::size_t s0 = 0; s0 < order.size(); s0 += cfg.bags_per_step) {
                const std::size_t k = std::min(cfg.bags_per_step, order.size() - s0);
                std::vector<ModelParamsT<S>> slot_grads(k);
                std::vector<BagCacheT<S>> caches(k);
                std::vector<std::string> errors(k);

                auto work = [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t j = lo; j < hi; ++j) {
                        try {
                            const std::size_t bi = order[s0 + j];
                            slot_grads[j] = zeros_like(model.params());
                            model.forward_bag(bags[bi].patches, scaled_y[bi], lw, cfg.pool,
                                              BnMode::train, &caches[j]);
                            model.backward_bag(scaled_y[bi], caches[j], lw, slot_grads[j]);
                        } catch (const std::exception& e) {
                            errors[j] = e.what();
                        }
                    }
                };
                if (n_threads <= 1 || k == 1) {
                    work(0, k);
                } else {
                    std::vector<std::thread> workers;
                    const std::size_t chunk = (k + n_threads - 1) / n_threads;
                    for (std::size_t t = 0; t < n_threads && t * chunk < k; ++t)
                        workers.emplace_back(work, t * chunk, std::min(k, (t + 1) * chunk));
                    for (auto& th : workers) th.join();
                }
                for (const auto& err : errors)
                    if (!err.empty()) throw numeric_error(err);

                // reduce per-bag gradients in bag index order, then average
                ModelParamsT<S>& grads = slot_grads[0];
                {
                    auto acc = trainable_list(grads);
                    for (std::size_t j = 1; j < k; ++j) {
                        auto add = trainable_list(slot_grads[j]);
                        for (std::size_t t = 0; t < acc.size(); ++t) *acc[t] += *add[t];
                    }
                    const S inv = S{1} / S(k);
                    for (auto* g : acc) *g *= inv;
                }
                if (cfg.grad_clip > 0) {
                    const double norm = detail::grad_norm(grads);
                    if (norm > cfg.grad_clip) {
                        const S scale = S(cfg.grad_clip / norm);
                        for_each_trainable(grads, [&](const char*, TensorT<S>& g) { g *= scale; });
                    }
                }
                if (cfg.arch.batchnorm)
                    for (std::size_t j = 0; j < k; ++j) {
                        batchnorm_update_running(model.params().bn1_state, caches[j].bn1c);
                        batchnorm_update_running(model.params().bn2_state, caches[j].bn2c);
                    }
                adam_step(model.params(), grads, out.opt, cfg);

                for (std::size_t j = 0; j < k; ++j) {
                    rec.L_d += double(caches[j].loss.discriminative);
                    rec.L_g += double(caches[j].loss.generative);
                    rec.R += double(caches[j].loss.attention_reg);
                    rec.total += double(caches[j].loss.total);
                }
                n_bags_seen += k;
            }
        } catch (const numeric_error& e) {
            out.params = last_good;
            out.opt = last_good_opt;
            out.aborted = true;
            out.abort_reason = e.what();
            return out;
        }

        rec.L_d /= double(n_bags_seen);
        rec.L_g /= double(n_bags_seen);
        rec.R /= double(n_bags_seen);
        rec.total /= double(n_bags_seen);
        rec.step = out.opt.t;

        if (!val_idx.empty() || (validation && validation->size() >= 2)) {
            std::vector<double> vy, vyhat;
            auto add = [&](const BagT<S>& bag) {
                vy.push_back(double(bag.y));
                vyhat.push_back(double(model.predict_subject(bag, cfg.pool)));
            };
            if (validation)
                for (const auto& bag : *validation) add(bag);
            else
                for (std::size_t i : val_idx) add(bags[i]);
            if (vy.size() >= 2) rec.val_r2 = r_squared(vy, vyhat);
        }
        out.log.push_back(rec);
        last_good = model.params();
        last_good_opt = out.opt;
    }

    out.params = model.params();
    return out;
}

inline void write_metrics_ndjson(const std::filesystem::path& path,
                                 const std::vector<MetricsRecord>& log) {
    std::ofstream os(path);
    if (!os) throw format_error("cannot open for write: " + path.string());
    for (const auto& rec : log) os << rec.to_json_line() << '\n';
    if (!os) throw format_error("short write: " + path.string());
}

}  // namespace setvec

#endif  // SETVEC_TRAIN_HPP_
