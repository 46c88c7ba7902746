#pragma once

// Stratified cross-validation, permutation control, ROC/AUC, Mann-Whitney
// rank-sum test, L2 logistic-regression baseline and hypergeometric
// enrichment with Holm step-down correction.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "omicsmap/error.hpp"
#include "omicsmap/io.hpp"

namespace omicsmap {

/// Runs body(0..n-1) on up to `jobs` threads; the first exception thrown by
/// any task is rethrown after all threads join.
template <class Body>
void parallel_for(std::size_t n, int jobs, Body&& body) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!first) first = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

// ------------------------------------------------------------------ folds

using Folds = std::vector<std::vector<std::size_t>>;

/// Per class, shuffled members are dealt round-robin into k folds. Each
/// class starts where the previous one stopped so fold totals stay even.
inline Folds stratified_kfold(const std::vector<int>& classes, int k, std::uint64_t seed) {
    if (k < 1) fail(ErrorKind::ClassTooSmall, "k must be >= 1");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < classes.size(); ++i) members[classes[i]].push_back(i);
    for (const auto& [c, m] : members)
        if (static_cast<int>(m.size()) < k)
            fail(ErrorKind::ClassTooSmall, "class " + std::to_string(c) + " has " + std::to_string(m.size()) +
                                               " members, fewer than k=" + std::to_string(k));
    std::mt19937_64 rng(seed);
    Folds folds(static_cast<std::size_t>(k));
    std::size_t next = 0;
    for (auto& [c, m] : members) {
        std::shuffle(m.begin(), m.end(), rng);
        for (auto idx : m) {
            folds[next].push_back(idx);
            next = (next + 1) % folds.size();
        }
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

/// Splits `indices` into (train, holdout) with about `frac` of every class
/// held out (at least one member per class that has two or more).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
stratified_holdout(const std::vector<std::size_t>& indices, const std::vector<int>& classes, double frac,
                   std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> members;
    for (auto i : indices) members[classes[i]].push_back(i);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> train, hold;
    for (auto& [c, m] : members) {
        std::shuffle(m.begin(), m.end(), rng);
        std::size_t n_hold = m.size() < 2 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frac * static_cast<double>(m.size()))));
        n_hold = std::min(n_hold, m.size() - 1);
        hold.insert(hold.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n_hold));
        train.insert(train.end(), m.begin() + static_cast<std::ptrdiff_t>(n_hold), m.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(hold.begin(), hold.end());
    return {train, hold};
}

// -------------------------------------------------------------------- ROC

struct RocPoint {
    double fpr = 0, tpr = 0;
};

struct RocResult {
    std::vector<RocPoint> points;
    double auc = 0;
};

/// Midranks (1-based) with ties averaged.
inline std::vector<double> midranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        for (std::size_t t = i; t <= j; ++t) r[order[t]] = 0.5 * static_cast<double>(i + j) + 1.0;
        i = j + 1;
    }
    return r;
}

/// ROC curve with one point per distinct score threshold and the AUC as
/// the Mann-Whitney statistic (ties count one half).
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& positive) {
    if (scores.size() != positive.size()) fail(ErrorKind::ShapeMismatch, "scores and labels differ in length");
    const auto n_pos = static_cast<double>(std::count_if(positive.begin(), positive.end(), [](int v) { return v != 0; }));
    const double n_neg = static_cast<double>(scores.size()) - n_pos;
    if (n_pos == 0 || n_neg == 0) fail(ErrorKind::OneClassOnly, "ROC needs both classes");

    RocResult res;
    const auto ranks = midranks(scores);
    double rank_sum = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (positive[i]) rank_sum += ranks[i];
    res.auc = (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    res.points.push_back({0, 0});
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (positive[order[j]] ? tp : fp) += 1;
            ++j;
        }
        res.points.push_back({fp / n_neg, tp / n_pos});
        i = j;
    }
    return res;
}

inline double trapezoid_area(const std::vector<RocPoint>& pts) {
    double a = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        a += (pts[i].fpr - pts[i - 1].fpr) * 0.5 * (pts[i].tpr + pts[i - 1].tpr);
    return a;
}

// --------------------------------------------------------------- rank-sum

/// Exact two-sided Mann-Whitney p-value by enumerating every assignment of
/// the pooled midranks to the first sample.
inline double ranksum_exact(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto r = midranks(pooled);
    const std::size_t n = pooled.size(), n1 = a.size();
    // doubled midranks are integers
    std::vector<int> r2(n);
    int total = 0;
    for (std::size_t i = 0; i < n; ++i) total += r2[i] = static_cast<int>(std::lround(2 * r[i]));
    int observed = 0;
    for (std::size_t i = 0; i < n1; ++i) observed += r2[i];

    // ways[j][s]: subsets of size j with doubled-rank sum s
    std::vector<std::vector<double>> ways(n1 + 1, std::vector<double>(static_cast<std::size_t>(total) + 1, 0.0));
    ways[0][0] = 1;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = std::min(i + 1, n1); j >= 1; --j)
            for (int s = total; s >= r2[i]; --s) ways[j][static_cast<std::size_t>(s)] += ways[j - 1][static_cast<std::size_t>(s - r2[i])];

    const double expected2 = static_cast<double>(n1) * static_cast<double>(n + 1); // doubled mean
    const double dev = std::abs(observed - expected2);
    double tail = 0, all = 0;
    for (int s = 0; s <= total; ++s) {
        const double w = ways[n1][static_cast<std::size_t>(s)];
        all += w;
        if (std::abs(s - expected2) >= dev - 1e-9) tail += w;
    }
    return std::min(1.0, tail / all);
}

/// Normal approximation with tie and continuity corrections.
inline double ranksum_normal(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto r = midranks(pooled);
    const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size()), n = n1 + n2;
    double w = 0;
    for (std::size_t i = 0; i < a.size(); ++i) w += r[i];
    const double u = w - n1 * (n1 + 1) / 2;
    std::map<double, int> ties;
    for (double v : pooled) ++ties[v];
    double tie_term = 0;
    for (const auto& [v, t] : ties) tie_term += static_cast<double>(t) * t * t - t;
    const double var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)));
    if (var <= 0) return 1.0;
    const double z = std::max(0.0, std::abs(u - n1 * n2 / 2) - 0.5) / std::sqrt(var);
    return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

/// Two-sided rank-sum p-value: exact for pooled size <= 24, normal
/// approximation above.
inline double ranksum_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) fail(ErrorKind::OutOfRange, "rank-sum needs two nonempty samples");
    return a.size() + b.size() <= 24 ? ranksum_exact(a, b) : ranksum_normal(a, b);
}

// ------------------------------------------------------ cross-validation

struct FoldMetrics {
    std::vector<std::size_t> test_indices;
    double accuracy = 0;
    std::vector<std::vector<int>> confusion; // [true][predicted]
    std::vector<RocResult> roc;              // one-vs-rest per class
    std::vector<std::vector<double>> probs;  // per test sample
};

struct CvSummary {
    double mean = 0, median = 0, sd = 0, ci_low = 0, ci_high = 0;
};

struct CvResult {
    std::vector<FoldMetrics> folds;
    CvSummary summary;
    std::vector<double> accuracies() const {
        std::vector<double> a;
        for (const auto& f : folds) a.push_back(f.accuracy);
        return a;
    }
};

inline FoldMetrics fold_metrics(const std::vector<std::size_t>& test, const std::vector<std::vector<double>>& probs,
                                const std::vector<int>& classes, int n_classes) {
    FoldMetrics m;
    m.test_indices = test;
    m.probs = probs;
    m.confusion.assign(static_cast<std::size_t>(n_classes), std::vector<int>(static_cast<std::size_t>(n_classes), 0));
    int correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& p = probs[i];
        const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        const int y = classes[test[i]];
        ++m.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(pred)];
        correct += pred == y;
    }
    m.accuracy = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
    for (int c = 0; c < n_classes; ++c) {
        std::vector<double> s;
        std::vector<int> pos;
        for (std::size_t i = 0; i < test.size(); ++i) {
            s.push_back(probs[i][static_cast<std::size_t>(c)]);
            pos.push_back(classes[test[i]] == c);
        }
        try {
            m.roc.push_back(roc_auc(s, pos));
        } catch (const Error&) {
            m.roc.push_back({{}, std::numeric_limits<double>::quiet_NaN()});
        }
    }
    return m;
}

inline CvSummary summarize(const std::vector<double>& acc) {
    CvSummary s;
    const double k = static_cast<double>(acc.size());
    if (acc.empty()) return s;
    s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / k;
    auto sorted = acc;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    double ss = 0;
    for (double a : acc) ss += (a - s.mean) * (a - s.mean);
    s.sd = acc.size() > 1 ? std::sqrt(ss / (k - 1)) : 0.0;
    const double half = 1.96 * s.sd / std::sqrt(k);
    s.ci_low = s.mean - half;
    s.ci_high = s.mean + half;
    return s;
}

/// Trains on all folds but one and returns class probabilities for the
/// held-out samples. `labels` is the (possibly permuted) label vector.
using FoldClassifier = std::function<std::vector<std::vector<double>>(
    const std::vector<std::size_t>& train, const std::vector<std::size_t>& test, const std::vector<int>& labels,
    int fold)>;

inline CvResult run_cv(const std::vector<int>& classes, int n_classes, int k, std::uint64_t seed,
                       const FoldClassifier& classifier, int jobs = 1) {
    const Folds folds = stratified_kfold(classes, k, seed);
    std::vector<std::vector<std::vector<double>>> probs(folds.size());
    auto run_fold = [&](std::size_t f) {
        std::vector<std::size_t> train;
        for (std::size_t g = 0; g < folds.size(); ++g)
            if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
        std::sort(train.begin(), train.end());
        probs[f] = classifier(train, folds[f], classes, static_cast<int>(f));
    };
    parallel_for(folds.size(), jobs, run_fold);
    CvResult res;
    for (std::size_t f = 0; f < folds.size(); ++f) res.folds.push_back(fold_metrics(folds[f], probs[f], classes, n_classes));
    res.summary = summarize(res.accuracies());
    return res;
}

/// Uniformly random permutation of the label vector (never skipped).
inline std::vector<int> permute_labels(const std::vector<int>& classes, std::uint64_t seed) {
    auto out = classes;
    std::mt19937_64 rng(seed);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

/// run_cv on labels permuted once with `permutation_seed`.
inline CvResult permutation_control(const std::vector<int>& classes, int n_classes, int k, std::uint64_t cv_seed,
                                    std::uint64_t permutation_seed, const FoldClassifier& classifier, int jobs = 1) {
    return run_cv(permute_labels(classes, permutation_seed), n_classes, k, cv_seed, classifier, jobs);
}

// ---------------------------------------------------- logistic regression

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LogRegModel {
    Eigen::VectorXd w;
    double intercept = 0;
};

namespace detail {
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
} // namespace detail

/// C * sum_i log(1 + exp(-y_i (x_i.w + c))) + w.w / 2, with y in {-1, +1}.
inline double logreg_cost(const Matrix& X, const Eigen::VectorXd& y, double C, const Eigen::VectorXd& w, double c) {
    const Eigen::VectorXd margin = (X * w).array() + c;
    double s = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) s += detail::softplus(-y[i] * margin[i]);
    return C * s + 0.5 * w.squaredNorm();
}

/// Gradient w.r.t. (w, c), returned as one vector with c last.
inline Eigen::VectorXd logreg_gradient(const Matrix& X, const Eigen::VectorXd& y, double C, const Eigen::VectorXd& w,
                                       double c) {
    const Eigen::VectorXd margin = (X * w).array() + c;
    Eigen::VectorXd r(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) r[i] = -y[i] * detail::sigmoid(-y[i] * margin[i]);
    Eigen::VectorXd g(w.size() + 1);
    g.head(w.size()) = C * (X.transpose() * r) + w;
    g[w.size()] = C * r.sum();
    return g;
}

struct LogRegFit {
    LogRegModel model;
    std::vector<double> cost_trace;
    bool converged = false;
};

/// Gradient descent with Barzilai-Borwein trial steps and Armijo
/// backtracking, until the gradient norm drops below `tol`.
inline LogRegFit fit_logreg(const Matrix& X, const Eigen::VectorXd& y, double C, double tol = 1e-6,
                            int max_iter = 200000) {
    const Eigen::Index p = X.cols();
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
    auto cost = [&](const Eigen::VectorXd& t) { return logreg_cost(X, y, C, t.head(p), t[p]); };
    auto grad = [&](const Eigen::VectorXd& t) { return logreg_gradient(X, y, C, t.head(p), t[p]); };
    LogRegFit fit;
    double f = cost(theta);
    Eigen::VectorXd g = grad(theta);
    fit.cost_trace.push_back(f);
    double step = 1.0 / std::max(1.0, C * static_cast<double>(X.rows()) * (1.0 + X.cwiseAbs2().rowwise().sum().maxCoeff()));
    for (int it = 0; it < max_iter; ++it) {
        if (g.norm() < tol) {
            fit.converged = true;
            break;
        }
        double t = step;
        Eigen::VectorXd next;
        double fn = 0;
        const double g2 = g.squaredNorm();
        for (int bt = 0; bt < 200; ++bt) {
            next = theta - t * g;
            fn = cost(next);
            if (fn <= f - 1e-4 * t * g2) break;
            t *= 0.5;
        }
        if (!(fn <= f)) break; // no descent possible at double precision
        const Eigen::VectorXd gn = grad(next);
        const Eigen::VectorXd s = next - theta, d = gn - g;
        const double sd = s.dot(d);
        step = sd > 0 ? s.squaredNorm() / sd : t * 2;
        theta = next;
        g = gn;
        f = fn;
        fit.cost_trace.push_back(f);
    }
    if (g.norm() < tol) fit.converged = true;
    fit.model.w = theta.head(p);
    fit.model.intercept = theta[p];
    return fit;
}

inline std::vector<double> logreg_scores(const LogRegModel& m, const Matrix& X) {
    Eigen::VectorXd s = (X * m.w).array() + m.intercept;
    return {s.data(), s.data() + s.size()};
}

namespace detail {

inline Matrix take_rows(const Matrix& X, const std::vector<std::size_t>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

inline Eigen::VectorXd take(const Eigen::VectorXd& y, const std::vector<std::size_t>& rows) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = y[static_cast<Eigen::Index>(rows[i])];
    return out;
}

inline std::vector<int> as_classes(const Eigen::VectorXd& y) {
    std::vector<int> c;
    for (Eigen::Index i = 0; i < y.size(); ++i) c.push_back(y[i] > 0 ? 1 : 0);
    return c;
}

// C chosen by mean inner-CV AUC; ties go to the smaller C.
inline double select_C(const Matrix& X, const Eigen::VectorXd& y, std::vector<double> grid, int k, std::uint64_t seed) {
    std::sort(grid.begin(), grid.end());
    const auto classes = as_classes(y);
    const int pos = static_cast<int>(std::count(classes.begin(), classes.end(), 1));
    const int inner_k = std::min({k, pos, static_cast<int>(classes.size()) - pos});
    if (inner_k < 2) return grid.front();
    const Folds folds = stratified_kfold(classes, inner_k, seed);
    double best_auc = -1, best_C = grid.front();
    for (double C : grid) {
        double auc_sum = 0;
        for (std::size_t f = 0; f < folds.size(); ++f) {
            std::vector<std::size_t> train;
            for (std::size_t g = 0; g < folds.size(); ++g)
                if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
            auto fit = fit_logreg(take_rows(X, train), take(y, train), C);
            auto scores = logreg_scores(fit.model, take_rows(X, folds[f]));
            std::vector<int> pos_f;
            for (auto i : folds[f]) pos_f.push_back(classes[i]);
            auc_sum += roc_auc(scores, pos_f).auc;
        }
        const double auc = auc_sum / static_cast<double>(folds.size());
        if (auc > best_auc) {
            best_auc = auc;
            best_C = C;
        }
    }
    return best_C;
}

} // namespace detail

struct LogRegCvResult {
    LogRegModel model; // refit on all samples with best_C
    double best_C = 1;
    std::vector<double> fold_auc;
    std::vector<double> fold_C;
};

/// Outer k-fold AUC of the L2 logistic regression, with C picked inside
/// every training split by an inner k-fold CV (as LogisticRegressionCV
/// does), and a final refit on all samples.
inline LogRegCvResult logreg_cv(const Matrix& X, const Eigen::VectorXd& y, const std::vector<double>& C_grid, int k,
                                std::uint64_t seed) {
    if (!X.allFinite()) fail(ErrorKind::NonFiniteFeature, "feature matrix has non-finite entries");
    if (C_grid.empty()) fail(ErrorKind::OutOfRange, "empty C grid");
    for (double C : C_grid)
        if (!(C > 0)) fail(ErrorKind::OutOfRange, "C must be positive");
    const auto classes = detail::as_classes(y);
    LogRegCvResult res;
    const Folds folds = stratified_kfold(classes, k, seed);
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<std::size_t> train;
        for (std::size_t g = 0; g < folds.size(); ++g)
            if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
        std::sort(train.begin(), train.end());
        const Matrix Xt = detail::take_rows(X, train);
        const Eigen::VectorXd yt = detail::take(y, train);
        const double C = detail::select_C(Xt, yt, C_grid, k, seed + f + 1);
        auto fit = fit_logreg(Xt, yt, C);
        auto scores = logreg_scores(fit.model, detail::take_rows(X, folds[f]));
        std::vector<int> pos;
        for (auto i : folds[f]) pos.push_back(classes[i]);
        res.fold_auc.push_back(roc_auc(scores, pos).auc);
        res.fold_C.push_back(C);
    }
    res.best_C = detail::select_C(X, y, C_grid, k, seed);
    res.model = fit_logreg(X, y, res.best_C).model;
    return res;
}

// -------------------------------------------------------------- enrichment

inline double log_choose(double n, double k) {
    return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1);
}

/// P[X >= k] for X ~ Hypergeometric(population N, successes K, draws n).
inline double hypergeom_sf(long k, long N, long K, long n) {
    const long hi = std::min(K, n);
    const long lo = std::max(0L, n - (N - K));
    if (k <= lo) return 1.0;
    if (k > hi) return 0.0;
    double s = 0;
    const double denom = log_choose(static_cast<double>(N), static_cast<double>(n));
    for (long i = k; i <= hi; ++i)
        s += std::exp(log_choose(static_cast<double>(K), static_cast<double>(i)) +
                      log_choose(static_cast<double>(N - K), static_cast<double>(n - i)) - denom);
    return std::min(1.0, s);
}

/// Holm step-down adjustment, returned in the input order.
inline std::vector<double> holm(const std::vector<double>& p) {
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    std::vector<double> out(m);
    double running = 0;
    for (std::size_t j = 0; j < m; ++j) {
        running = std::max(running, std::min(1.0, static_cast<double>(m - j) * p[order[j]]));
        out[order[j]] = running;
    }
    return out;
}

struct EnrichmentRow {
    std::string group;
    long overlap = 0;       // k
    long group_size = 0;    // K
    long selected_size = 0; // n
    long background = 0;    // N
    double p_raw = 1;
    double p_holm = 1;
    bool operator==(const EnrichmentRow&) const = default;
};

/// One-sided hypergeometric over-representation per group, Holm-corrected
/// across groups; rows sorted by raw p, then group label.
inline std::vector<EnrichmentRow> enrich_hypergeom(const std::set<std::string>& selected,
                                                   const std::set<std::string>& background,
                                                   const std::vector<std::pair<std::string, std::set<std::string>>>& groups) {
    for (const auto& s : selected)
        if (!background.contains(s)) fail(ErrorKind::SelectionNotInBackground, "'" + s + "' not in background");
    std::vector<EnrichmentRow> rows;
    const long N = static_cast<long>(background.size()), n = static_cast<long>(selected.size());
    for (const auto& [label, members] : groups) {
        EnrichmentRow r;
        r.group = label;
        r.background = N;
        r.selected_size = n;
        for (const auto& g : members) {
            if (!background.contains(g)) continue;
            ++r.group_size;
            r.overlap += selected.contains(g);
        }
        r.p_raw = hypergeom_sf(r.overlap, N, r.group_size, n);
        rows.push_back(std::move(r));
    }
    std::vector<double> p;
    for (const auto& r : rows) p.push_back(r.p_raw);
    const auto adj = holm(p);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].p_holm = adj[i];
    std::stable_sort(rows.begin(), rows.end(), [](const EnrichmentRow& a, const EnrichmentRow& b) {
        if (a.p_raw != b.p_raw) return a.p_raw < b.p_raw;
        return a.group < b.group;
    });
    return rows;
}

// ----------------------------------------------------------------- output

inline std::string format_enrichment(const std::vector<EnrichmentRow>& rows) {
    std::string out = "group\toverlap\tgroup_size\tselected_size\tbackground_size\tp_raw\tp_holm\n";
    for (const auto& r : rows)
        out += r.group + "\t" + std::to_string(r.overlap) + "\t" + std::to_string(r.group_size) + "\t" +
               std::to_string(r.selected_size) + "\t" + std::to_string(r.background) + "\t" + io::exact(r.p_raw) +
               "\t" + io::exact(r.p_holm) + "\n";
    return out;
}

inline std::string format_fold_csv(const CvResult& cv, const std::vector<std::string>& class_names) {
    std::string out = "fold,n_test,accuracy";
    for (const auto& c : class_names) out += ",auc_" + c;
    out += ",confusion\n";
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
        const auto& m = cv.folds[f];
        out += std::to_string(f) + "," + std::to_string(m.test_indices.size()) + "," + io::exact(m.accuracy);
        for (const auto& r : m.roc) out += "," + (std::isnan(r.auc) ? std::string("NA") : io::exact(r.auc));
        out += ",";
        for (std::size_t i = 0; i < m.confusion.size(); ++i)
            for (std::size_t j = 0; j < m.confusion[i].size(); ++j)
                out += (i || j ? ";" : "") + std::to_string(m.confusion[i][j]);
        out += "\n";
    }
    return out;
}

inline std::string format_summary_csv(const CvSummary& s) {
    return "mean,median,sd,ci_low,ci_high\n" + io::exact(s.mean) + "," + io::exact(s.median) + "," + io::exact(s.sd) +
           "," + io::exact(s.ci_low) + "," + io::exact(s.ci_high) + "\n";
}

inline std::string format_roc_csv(const std::vector<RocResult>& per_fold) {
    std::string out = "fold,fpr,tpr\n";
    for (std::size_t f = 0; f < per_fold.size(); ++f)
        for (const auto& p : per_fold[f].points)
            out += std::to_string(f) + "," + io::exact(p.fpr) + "," + io::exact(p.tpr) + "\n";
    return out;
}

/// Standalone SVG with one polyline per fold curve and the chance diagonal.
inline std::string roc_svg(const std::vector<RocResult>& per_fold, const std::string& title) {
    const int size = 400, pad = 40, inner = size - 2 * pad;
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size) + "\" height=\"" +
                    std::to_string(size) + "\">\n";
    s += "<rect x=\"" + std::to_string(pad) + "\" y=\"" + std::to_string(pad) + "\" width=\"" + std::to_string(inner) +
         "\" height=\"" + std::to_string(inner) + "\" fill=\"none\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + std::to_string(pad) + "\" y1=\"" + std::to_string(pad + inner) + "\" x2=\"" +
         std::to_string(pad + inner) + "\" y2=\"" + std::to_string(pad) + "\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n";
    s += "<text x=\"" + std::to_string(pad) + "\" y=\"" + std::to_string(pad - 10) + "\" font-size=\"14\">" + title +
         "</text>\n";
    for (const auto& r : per_fold) {
        s += "<polyline fill=\"none\" stroke=\"steelblue\" points=\"";
        for (const auto& p : r.points)
            s += io::fixed(pad + p.fpr * inner, 2) + "," + io::fixed(pad + (1 - p.tpr) * inner, 2) + " ";
        s += "\"/>\n";
    }
    s += "</svg>\n";
    return s;
}

} // namespace omicsmap
