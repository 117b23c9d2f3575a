#include "ilm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "ilm/errors.hpp"

namespace ilm {

namespace {

constexpr int kEvalBatch = 32;

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> records,
                       bool append) {
    const bool exists = [&] {
        std::ifstream probe(path);
        return probe.good();
    }();
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    if (!append || !exists) {
        out << "experiment,variant,config_hash,seed,steps,metric,value,ci_low,ci_high\n";
    }
    for (const MetricsRecord& r : records) {
        out << r.experiment << ',' << r.variant << ',' << r.config_hash << ',' << r.seed << ','
            << r.steps << ',' << r.metric << ',' << fmt_double(r.value) << ',';
        if (r.ci) {
            out << fmt_double(r.ci->first) << ',' << fmt_double(r.ci->second);
        } else {
            out << ',';
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open metrics file '" + path + "'");
    }
    std::vector<MetricsRecord> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue; // header
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        while (cells.size() < 9) {
            cells.emplace_back();
        }
        MetricsRecord r;
        r.experiment = cells[0];
        r.variant = cells[1];
        r.config_hash = cells[2];
        r.seed = std::stoull(cells[3]);
        r.steps = std::stoll(cells[4]);
        r.metric = cells[5];
        r.value = std::stod(cells[6]);
        if (!cells[7].empty() && !cells[8].empty()) {
            r.ci = {std::stod(cells[7]), std::stod(cells[8])};
        }
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// perplexity

double perplexity(const InvariantModel& model, std::span<const std::vector<int32_t>> test_seqs,
                  const Vocabulary& vocab, double mask_rate, uint64_t seed) {
    if (test_seqs.empty()) {
        throw ContractError("perplexity: empty test set");
    }
    double total_nll = 0.0;
    int64_t total_count = 0;
    int64_t batch_index = 0;
    for (size_t start = 0; start < test_seqs.size(); start += kEvalBatch, ++batch_index) {
        const size_t end = std::min(test_seqs.size(), start + kEvalBatch);
        Rng mask_rng(mix_seed(seed, "evalmask", static_cast<uint64_t>(batch_index)));
        MaskedBatch batch =
            mask_tokens(test_seqs.subspan(start, end - start), mask_rate, mask_rng, vocab);
        int64_t count = 0;
        for (int32_t t : batch.targets.v) {
            if (t != Tape::kIgnoreId) {
                ++count;
            }
        }
        Tape tape;
        Tensor logits = model.forward_ensemble(tape, batch.input_ids);
        Tensor loss = tape.masked_cross_entropy(logits, batch.targets);
        total_nll += static_cast<double>(loss.item()) * static_cast<double>(count);
        total_count += count;
    }
    if (total_count == 0) {
        throw ContractError("perplexity: evaluation selected no masked positions");
    }
    return std::exp(total_nll / static_cast<double>(total_count));
}

// ---------------------------------------------------------------------------
// entropy bias

double binary_entropy(double q) {
    if (!(q >= 0.0 && q <= 1.0)) {
        throw ContractError("binary_entropy: q = " + std::to_string(q) + " outside [0,1]");
    }
    double h = 0.0;
    if (q > 0.0) {
        h -= q * std::log2(q);
    }
    if (q < 1.0) {
        h -= (1.0 - q) * std::log2(1.0 - q);
    }
    return h;
}

EntropyBiasResult entropy_bias(const InvariantModel& model,
                               std::span<const std::vector<int32_t>> test_seqs,
                               const Vocabulary& vocab) {
    struct Job {
        size_t seq;
        size_t pos;
        int32_t id_f;
        int32_t id_m;
    };
    std::vector<Job> jobs;
    for (size_t s = 0; s < test_seqs.size(); ++s) {
        const auto& seq = test_seqs[s];
        for (size_t p = 0; p < seq.size(); ++p) {
            for (const auto& [f, m] : vocab.pairs) {
                if (seq[p] == f || seq[p] == m) {
                    jobs.push_back({s, p, f, m});
                    break;
                }
            }
        }
    }
    if (jobs.empty()) {
        throw ContractError("entropy_bias: test set contains no pair-token occurrence");
    }

    EntropyBiasResult result;
    double total = 0.0;
    for (size_t start = 0; start < jobs.size(); start += kEvalBatch) {
        const size_t end = std::min(jobs.size(), start + kEvalBatch);
        int64_t max_len = 0;
        for (size_t j = start; j < end; ++j) {
            max_len = std::max<int64_t>(max_len,
                                        static_cast<int64_t>(test_seqs[jobs[j].seq].size()));
        }
        IdMatrix ids(static_cast<int64_t>(end - start), max_len, Vocabulary::kPad);
        for (size_t j = start; j < end; ++j) {
            const auto& seq = test_seqs[jobs[j].seq];
            const int64_t r = static_cast<int64_t>(j - start);
            for (size_t c = 0; c < seq.size(); ++c) {
                ids.at(r, static_cast<int64_t>(c)) = seq[c];
            }
            ids.at(r, static_cast<int64_t>(jobs[j].pos)) = Vocabulary::kMask;
        }
        Tape tape;
        Tensor logits = model.forward_ensemble(tape, ids); // [rows, L, V]
        const int64_t v = logits.dim(2);
        const float* lp = logits.data().data();
        for (size_t j = start; j < end; ++j) {
            const int64_t r = static_cast<int64_t>(j - start);
            const float* row = lp + static_cast<size_t>((r * max_len +
                                                         static_cast<int64_t>(jobs[j].pos)) * v);
            double mx = row[0];
            for (int64_t c = 1; c < v; ++c) {
                mx = std::max(mx, static_cast<double>(row[c]));
            }
            double sum = 0.0;
            for (int64_t c = 0; c < v; ++c) {
                sum += std::exp(static_cast<double>(row[c]) - mx);
            }
            const double s_f = std::exp(static_cast<double>(row[jobs[j].id_f]) - mx) / sum;
            const double s_m = std::exp(static_cast<double>(row[jobs[j].id_m]) - mx) / sum;
            if (s_f + s_m <= 0.0) {
                ++result.n_skipped;
                continue;
            }
            total += 1.0 - binary_entropy(s_f / (s_f + s_m));
            ++result.n_positions;
        }
    }
    if (result.n_positions == 0) {
        throw ContractError("entropy_bias: every pair position had zero pair mass");
    }
    result.mean_bias = total / static_cast<double>(result.n_positions);
    return result;
}

// ---------------------------------------------------------------------------
// head distances

DistMatrix head_distances(const InvariantModel& model) {
    const int n = model.n_heads();
    std::vector<std::vector<float>> flats;
    for (int e = 0; e < n; ++e) {
        flats.push_back(model.head_weights_flat(e));
    }
    DistMatrix out;
    out.n = n;
    out.d.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < flats[static_cast<size_t>(i)].size(); ++k) {
                const double diff = static_cast<double>(flats[static_cast<size_t>(i)][k]) -
                                    flats[static_cast<size_t>(j)][k];
                acc += diff * diff;
            }
            out.at(i, j) = out.at(j, i) = std::sqrt(acc);
        }
    }
    return out;
}

std::pair<double, double> d_in_d_out(const DistMatrix& dist, std::span<const int> domain_of_env) {
    if (static_cast<int>(domain_of_env.size()) != dist.n) {
        throw ContractError("d_in_d_out: grouping covers " + std::to_string(domain_of_env.size()) +
                            " envs, matrix has " + std::to_string(dist.n));
    }
    std::map<int, int> counts;
    for (int g : domain_of_env) {
        counts[g] += 1;
    }
    if (counts.size() < 2) {
        throw ContractError("d_in_d_out: degenerate grouping (need >= 2 domains)");
    }
    for (const auto& [label, count] : counts) {
        if (count < 2) {
            throw ContractError("d_in_d_out: degenerate grouping (domain " +
                                std::to_string(label) + " has " + std::to_string(count) +
                                " envs, need >= 2)");
        }
    }
    double in_sum = 0.0, out_sum = 0.0;
    int64_t in_n = 0, out_n = 0;
    for (int i = 0; i < dist.n; ++i) {
        for (int j = i + 1; j < dist.n; ++j) {
            if (domain_of_env[static_cast<size_t>(i)] == domain_of_env[static_cast<size_t>(j)]) {
                in_sum += dist.at(i, j);
                ++in_n;
            } else {
                out_sum += dist.at(i, j);
                ++out_n;
            }
        }
    }
    return {in_sum / static_cast<double>(in_n), out_sum / static_cast<double>(out_n)};
}

// ---------------------------------------------------------------------------
// bootstrap & paired comparison

std::pair<double, double> bootstrap_ci(std::span<const double> samples, int n_resamples,
                                       double level, uint64_t seed) {
    if (samples.size() < 2) {
        throw ContractError("bootstrap_ci: need >= 2 samples, got " +
                            std::to_string(samples.size()));
    }
    if (n_resamples < 100) {
        throw ContractError("bootstrap_ci: need >= 100 resamples");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw ContractError("bootstrap_ci: level must lie in (0,1)");
    }
    const size_t n = samples.size();
    Rng rng(seed);
    std::vector<double> stats(static_cast<size_t>(n_resamples));
    for (int r = 0; r < n_resamples; ++r) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) {
            acc += samples[static_cast<size_t>(rng.below(n))];
        }
        stats[static_cast<size_t>(r)] = acc / static_cast<double>(n);
    }
    std::sort(stats.begin(), stats.end());
    const double alpha = 1.0 - level;
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(n_resamples - 1);
        const size_t lo = static_cast<size_t>(std::floor(pos));
        const size_t hi = std::min(lo + 1, stats.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return stats[lo] * (1.0 - frac) + stats[hi] * frac;
    };
    return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

double paired_win_probability(std::span<const std::pair<double, double>> pairs,
                              bool lower_is_better) {
    if (pairs.empty()) {
        throw ContractError("paired_win_probability: no pairs");
    }
    double wins = 0.0;
    for (const auto& [a, b] : pairs) {
        if (a == b) {
            wins += 0.5;
        } else if ((a < b) == lower_is_better) {
            wins += 1.0;
        }
    }
    return wins / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// classical MDS

std::vector<std::vector<double>> classical_mds(const DistMatrix& dist, int dim) {
    const int n = dist.n;
    if (n < 1 || dim < 1) {
        throw ContractError("classical_mds: empty input");
    }
    for (int i = 0; i < n; ++i) {
        if (dist.at(i, i) != 0.0) {
            throw ContractError("classical_mds: nonzero diagonal");
        }
        for (int j = 0; j < n; ++j) {
            if (dist.at(i, j) < 0.0) {
                throw ContractError("classical_mds: negative distance");
            }
            if (std::abs(dist.at(i, j) - dist.at(j, i)) > 1e-9) {
                throw ContractError("classical_mds: matrix not symmetric at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }

    // B = -1/2 J D^2 J via direct double centering.
    std::vector<double> sq(static_cast<size_t>(n) * n);
    std::vector<double> row_mean(static_cast<size_t>(n), 0.0);
    double grand = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double v = dist.at(i, j) * dist.at(i, j);
            sq[static_cast<size_t>(i) * n + j] = v;
            row_mean[static_cast<size_t>(i)] += v;
        }
        row_mean[static_cast<size_t>(i)] /= n;
        grand += row_mean[static_cast<size_t>(i)];
    }
    grand /= n;
    std::vector<double> b(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            b[static_cast<size_t>(i) * n + j] =
                -0.5 * (sq[static_cast<size_t>(i) * n + j] - row_mean[static_cast<size_t>(i)] -
                        row_mean[static_cast<size_t>(j)] + grand);
        }
    }

    constexpr double kTol = 1e-10;
    constexpr int kMaxIter = 10000;
    std::vector<std::vector<double>> coords(static_cast<size_t>(n),
                                            std::vector<double>(static_cast<size_t>(dim), 0.0));
    Rng rng(fnv1a64("mds-power-iteration"));
    std::vector<double> vec(static_cast<size_t>(n)), next(static_cast<size_t>(n));
    for (int component = 0; component < dim; ++component) {
        for (double& x : vec) {
            x = rng.gaussian();
        }
        double lambda = 0.0;
        for (int iter = 0; iter < kMaxIter; ++iter) {
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) {
                    acc += b[static_cast<size_t>(i) * n + j] * vec[static_cast<size_t>(j)];
                }
                next[static_cast<size_t>(i)] = acc;
            }
            // Rayleigh quotient with the pre-normalization iterate keeps the
            // eigenvalue sign (a negative lambda flips vec every step).
            double rayleigh = 0.0;
            double norm = 0.0;
            for (int i = 0; i < n; ++i) {
                rayleigh += vec[static_cast<size_t>(i)] * next[static_cast<size_t>(i)];
                norm += next[static_cast<size_t>(i)] * next[static_cast<size_t>(i)];
            }
            norm = std::sqrt(norm);
            if (norm < 1e-300) {
                lambda = 0.0;
                break; // residual matrix is (numerically) zero
            }
            for (int i = 0; i < n; ++i) {
                vec[static_cast<size_t>(i)] = next[static_cast<size_t>(i)] / norm;
            }
            const double delta = std::abs(rayleigh - lambda);
            lambda = rayleigh;
            if (iter > 0 && delta <= kTol * std::max(1.0, std::abs(lambda))) {
                break;
            }
        }
        const double scale = lambda > 0.0 ? std::sqrt(lambda) : 0.0;
        for (int i = 0; i < n; ++i) {
            coords[static_cast<size_t>(i)][static_cast<size_t>(component)] =
                vec[static_cast<size_t>(i)] * scale;
        }
        // deflate
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                b[static_cast<size_t>(i) * n + j] -=
                    lambda * vec[static_cast<size_t>(i)] * vec[static_cast<size_t>(j)];
            }
        }
    }
    return coords;
}

} // namespace ilm
