#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/model.hpp"

namespace ilm {

// One evaluation outcome, serialized as a CSV row.
struct MetricsRecord {
    std::string experiment;
    std::string variant; // "ilm" | "elm"
    std::string config_hash;
    uint64_t seed = 0;
    int64_t steps = 0;
    std::string metric;
    double value = 0.0;
    std::optional<std::pair<double, double>> ci;
};

void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> records,
                       bool append);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

// exp(mean masked cross-entropy) over a seeded masked view of the test set.
// The seed fixes the masked view, so compared models see identical masks.
double perplexity(const InvariantModel& model, std::span<const std::vector<int32_t>> test_seqs,
                  const Vocabulary& vocab, double mask_rate, uint64_t seed);

// H2(q) = -q log2 q - (1-q) log2(1-q), with 0 log 0 = 0. q must be in [0,1].
double binary_entropy(double q);

struct EntropyBiasResult {
    double mean_bias = 0.0; // mean of 1 - H2(s_f / (s_f + s_m))
    int64_t n_positions = 0;
    int64_t n_skipped = 0; // positions where s_f + s_m underflowed to 0
};

// Masks each pair-token occurrence (one at a time), reads the softmax scores
// of the two pair members at that position, and averages the entropy bias.
EntropyBiasResult entropy_bias(const InvariantModel& model,
                               std::span<const std::vector<int32_t>> test_seqs,
                               const Vocabulary& vocab);

struct DistMatrix {
    int n = 0;
    std::vector<double> d; // n x n row-major

    double at(int i, int j) const { return d[static_cast<size_t>(i) * n + j]; }
    double& at(int i, int j) { return d[static_cast<size_t>(i) * n + j]; }
};

// Symmetric matrix of L2 distances between linearized head weights.
DistMatrix head_distances(const InvariantModel& model);

// Mean within-domain and cross-domain head distance. Every domain label must
// cover >= 2 environments and there must be >= 2 domains.
std::pair<double, double> d_in_d_out(const DistMatrix& dist,
                                     std::span<const int> domain_of_env);

// Percentile bootstrap CI for the mean. Resample indices come from
// Rng(seed).below(n), row by row; the interval bounds are the linearly
// interpolated empirical quantiles at alpha/2 and 1-alpha/2 of the sorted
// resampled means (position q*(R-1)).
std::pair<double, double> bootstrap_ci(std::span<const double> samples, int n_resamples,
                                       double level, uint64_t seed);

// Fraction of pairs where the first entry wins; exact ties count 0.5.
double paired_win_probability(std::span<const std::pair<double, double>> pairs,
                              bool lower_is_better = true);

// Classical MDS: double-center -1/2 J D^2 J, extract the top eigenpairs by
// power iteration with deflation, scale eigenvectors by sqrt(max(lambda,0)).
// Output is n x dim, determined up to sign/rotation.
std::vector<std::vector<double>> classical_mds(const DistMatrix& dist, int dim = 2);

} // namespace ilm
