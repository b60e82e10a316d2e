#ifndef SETVEC_EVAL_HPP_
#define SETVEC_EVAL_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "setvec/model.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

// ---------------------------------------------------------------------------
// regression / classification metrics
// ---------------------------------------------------------------------------

inline double r_squared(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.size() != yhat.size())
        throw dim_error("r_squared: length mismatch " + std::to_string(y.size()) + " vs " +
                        std::to_string(yhat.size()));
    if (y.size() < 2) throw domain_error("r_squared: need at least 2 samples");
    double mean = 0;
    for (double v : y) mean += v;
    mean /= double(y.size());
    double ss_tot = 0, ss_res = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_tot += (y[i] - mean) * (y[i] - mean);
        ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    }
    if (ss_tot == 0) throw domain_error("r_squared: constant targets");
    return 1.0 - ss_res / ss_tot;
}

inline double ordinal_accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                               int max_offset) {
    if (y_true.size() != y_pred.size())
        throw dim_error("ordinal_accuracy: length mismatch");
    if (y_true.empty()) throw domain_error("ordinal_accuracy: empty input");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i)
        if (std::abs(y_true[i] - y_pred[i]) <= max_offset) ++hits;
    return double(hits) / double(y_true.size());
}

// ---------------------------------------------------------------------------
// ROC / AUC, two independent routes
// ---------------------------------------------------------------------------

struct RocCurve {
    std::vector<double> thresholds;  // score at each vertex (descending)
    std::vector<double> fpr, tpr;    // monotone non-decreasing vertex lists
    double auc = 0;                  // trapezoidal integral of the curve
};

// Staircase ROC with tied scores grouped into single (diagonal) segments, so
// the trapezoid area equals the pairwise ranking probability with ties at 1/2.
inline RocCurve roc_from_scores(const std::vector<double>& scores,
                                const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw dim_error("roc_from_scores: length mismatch");
    std::size_t pos = 0, neg = 0;
    for (std::uint8_t l : labels) (l ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw domain_error("roc_from_scores: need both classes present");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve roc;
    roc.thresholds.push_back(std::numeric_limits<double>::infinity());
    roc.fpr.push_back(0);
    roc.tpr.push_back(0);
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] ? tp : fp)++;
            ++i;
        }
        roc.thresholds.push_back(s);
        roc.fpr.push_back(double(fp) / double(neg));
        roc.tpr.push_back(double(tp) / double(pos));
    }
    for (std::size_t k = 1; k < roc.fpr.size(); ++k)
        roc.auc += (roc.fpr[k] - roc.fpr[k - 1]) * (roc.tpr[k] + roc.tpr[k - 1]) / 2.0;
    return roc;
}

// Probability that a random relevant instance outranks a random non-relevant
// one; ties count 1/2. Independent of the curve construction above.
inline double pairwise_auc(const std::vector<double>& scores,
                           const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw dim_error("pairwise_auc: length mismatch");
    double wins = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    if (pairs == 0) throw domain_error("pairwise_auc: need both classes present");
    return wins / double(pairs);
}

struct AttentionRocResult {
    std::vector<RocCurve> per_bag;
    std::vector<double> grid_fpr;   // fixed 101-point grid
    std::vector<double> mean_tpr;   // vertical average over bags
    std::vector<double> std_tpr;    // dispersion across bags at each grid point
    double mean_auc = 0;            // mean pairwise-ranking AUC
    std::size_t skipped = 0;        // bags lacking both classes
};

inline double interp_tpr(const RocCurve& roc, double fpr) {
    // upper envelope of the vertex list: vertical segments contribute their
    // top, partial segments interpolate linearly
    double best = 0;
    for (std::size_t k = 0; k < roc.fpr.size(); ++k) {
        if (roc.fpr[k] <= fpr) {
            best = std::max(best, roc.tpr[k]);
        } else {
            if (k > 0 && roc.fpr[k] > roc.fpr[k - 1]) {
                const double t = (fpr - roc.fpr[k - 1]) / (roc.fpr[k] - roc.fpr[k - 1]);
                best = std::max(best, roc.tpr[k - 1] + t * (roc.tpr[k] - roc.tpr[k - 1]));
            }
            break;
        }
    }
    return best;
}

template <typename S>
AttentionRocResult attention_roc(const std::vector<BagT<S>>& bags,
                                 const std::vector<AttentionMapT<S>>& maps) {
    if (bags.size() != maps.size()) throw dim_error("attention_roc: bag/map count mismatch");
    AttentionRocResult out;
    std::vector<double> aucs;
    for (std::size_t b = 0; b < bags.size(); ++b) {
        const auto& bag = bags[b];
        if (bag.relevance.size() != bag.size())
            throw usage_error("attention_roc: bag " + bag.subject_id + " lacks a relevance mask");
        if (maps[b].weights.size() != bag.size())
            throw usage_error("attention_roc: attention map size mismatch for " + bag.subject_id);
        std::size_t pos = 0;
        for (std::uint8_t r : bag.relevance) pos += r ? 1 : 0;
        if (pos == 0 || pos == bag.size()) {
            ++out.skipped;
            continue;
        }
        std::vector<double> scores(bag.size());
        for (std::size_t j = 0; j < bag.size(); ++j) scores[j] = double(maps[b].weights[j]);
        out.per_bag.push_back(roc_from_scores(scores, bag.relevance));
        aucs.push_back(pairwise_auc(scores, bag.relevance));
    }
    if (out.per_bag.empty()) throw domain_error("attention_roc: no bag has both classes");

    out.grid_fpr.resize(101);
    out.mean_tpr.assign(101, 0);
    out.std_tpr.assign(101, 0);
    for (int g = 0; g <= 100; ++g) out.grid_fpr[g] = double(g) / 100.0;
    for (int g = 0; g <= 100; ++g) {
        double sum = 0, sum2 = 0;
        for (const auto& roc : out.per_bag) {
            const double t = interp_tpr(roc, out.grid_fpr[g]);
            sum += t;
            sum2 += t * t;
        }
        const double n = double(out.per_bag.size());
        out.mean_tpr[g] = sum / n;
        out.std_tpr[g] = std::sqrt(std::max(0.0, sum2 / n - (sum / n) * (sum / n)));
    }
    for (double a : aucs) out.mean_auc += a;
    out.mean_auc /= double(aucs.size());
    return out;
}

// ---------------------------------------------------------------------------
// latent spectrum / effective rank
// ---------------------------------------------------------------------------

struct SpectrumReport {
    std::vector<double> singular_values;      // descending
    std::vector<double> explained_variance;   // sigma_k^2 / sum sigma^2
    double effective_rank = 1;                // exp(entropy of sigma / sum sigma)
    std::size_t threshold_rank = 0;           // #{sigma_k > 0.01 * sigma_1}
};

// Cyclic Jacobi eigenvalues of a small symmetric PSD matrix (d x d).
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t d) {
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double akp = a[k * d + p], akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double apk = a[p * d + k], aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(d);
    for (std::size_t k = 0; k < d; ++k) eig[k] = a[k * d + k];
    return eig;
}

template <typename S>
SpectrumReport latent_spectrum(const TensorT<S>& latents) {
    if (latents.rank() != 2)
        throw dim_error("latent_spectrum: want [n,d], got " + shape_str(latents.shape()));
    const std::size_t n = latents.extent(0), d = latents.extent(1);
    if (n < 1) throw domain_error("latent_spectrum: empty input");

    // column-center, then take sqrt of the Gram spectrum
    std::vector<double> mean(d, 0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) mean[c] += double(latents(r, c));
    for (double& v : mean) v /= double(n);
    std::vector<double> gram(d * d, 0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = double(latents(r, i)) - mean[i];
            for (std::size_t j = i; j < d; ++j)
                gram[i * d + j] += xi * (double(latents(r, j)) - mean[j]);
        }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j) gram[i * d + j] = gram[j * d + i];

    std::vector<double> eig = jacobi_eigenvalues(std::move(gram), d);
    SpectrumReport rep;
    rep.singular_values.reserve(d);
    for (double e : eig) rep.singular_values.push_back(std::sqrt(std::max(0.0, e)));
    std::sort(rep.singular_values.rbegin(), rep.singular_values.rend());

    double total = 0, total2 = 0;
    for (double s : rep.singular_values) {
        total += s;
        total2 += s * s;
    }
    if (total <= 0) {
        rep.effective_rank = 1;
        rep.threshold_rank = 0;
        rep.explained_variance.assign(d, 0);
        return rep;
    }
    double entropy = 0;
    for (double s : rep.singular_values) {
        const double p = s / total;
        if (p > 0) entropy -= p * std::log(p);
    }
    rep.effective_rank = std::exp(entropy);
    rep.explained_variance.reserve(d);
    for (double s : rep.singular_values) rep.explained_variance.push_back(s * s / total2);
    for (double s : rep.singular_values)
        if (s > 0.01 * rep.singular_values[0]) ++rep.threshold_rank;
    return rep;
}

// ---------------------------------------------------------------------------
// exports (deterministic formatting, 9 significant digits)
// ---------------------------------------------------------------------------

inline std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

template <typename S>
void export_attention(const BagT<S>& bag, const AttentionMapT<S>& map, std::ostream& os) {
    if (map.weights.size() != bag.size())
        throw usage_error("export_attention: map size " + std::to_string(map.weights.size()) +
                          " does not match bag size " + std::to_string(bag.size()));
    for (std::size_t j = 0; j < bag.size(); ++j) {
        os << bag.subject_id << ',' << j << ',';
        if (j < bag.coordinates.size())
            os << bag.coordinates[j][0] << ',' << bag.coordinates[j][1] << ','
               << bag.coordinates[j][2];
        else
            os << ",,";
        os << ',' << fmt_g9(double(map.weights[j])) << '\n';
    }
}

template <typename S>
void export_attention_csv(const std::filesystem::path& path, const std::vector<BagT<S>>& bags,
                          const std::vector<AttentionMapT<S>>& maps) {
    if (bags.size() != maps.size()) throw usage_error("export_attention_csv: count mismatch");
    std::ofstream os(path);
    if (!os) throw format_error("cannot open for write: " + path.string());
    os << "subject_id,patch_index,coord_z,coord_y,coord_x,alpha\n";
    for (std::size_t b = 0; b < bags.size(); ++b) export_attention(bags[b], maps[b], os);
    if (!os) throw format_error("short write: " + path.string());
}

template <typename S>
void export_subject_vectors(const std::filesystem::path& path, const std::vector<BagT<S>>& bags,
                            const ModelT<S>& model, PoolMode pool_mode) {
    std::ofstream os(path);
    if (!os) throw format_error("cannot open for write: " + path.string());
    os << "subject_id,y";
    for (std::size_t i = 0; i < model.config().d; ++i) os << ",v" << i;
    os << '\n';
    for (const auto& bag : bags) {
        BagCacheT<S> c;
        model.encode_bag(bag.patches, BnMode::eval, &c);
        model.attention(c.H, &c);
        const TensorT<S> v = pool(c.H, pool_mode, &c.alpha);
        os << bag.subject_id << ',' << fmt_g9(double(bag.y));
        for (std::size_t i = 0; i < v.size(); ++i) os << ',' << fmt_g9(double(v[i]));
        os << '\n';
    }
    if (!os) throw format_error("short write: " + path.string());
}

}  // namespace setvec

#endif  // SETVEC_EVAL_HPP_
