#include "ilm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ilm/checkpoint.hpp"
#include "ilm/errors.hpp"
#include "ilm/svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ilm::harness {

namespace {

constexpr int kBootstrapResamples = 2000;
constexpr double kBootstrapLevel = 0.95;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out << content;
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <class T>
T field(const json& j, const std::string& name, const T& fallback) {
    if (!j.contains(name)) {
        return fallback;
    }
    try {
        return j.at(name).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config field '" + name + "': " + e.what());
    }
}

template <class T>
T required_field(const json& j, const std::string& name) {
    if (!j.contains(name)) {
        throw ConfigError("config: missing required field '" + name + "'");
    }
    try {
        return j.at(name).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config field '" + name + "': " + e.what());
    }
}

} // namespace

uint64_t data_seed(const ExperimentConfig& cfg) {
    return mix_seed(cfg.master_seed, "data");
}

uint64_t eval_seed(const ExperimentConfig& cfg) {
    return mix_seed(cfg.master_seed, "eval");
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    ExperimentConfig cfg;
    cfg.experiment = required_field<std::string>(j, "experiment");
    if (cfg.experiment != "structured_noise" && cfg.experiment != "correlation" &&
        cfg.experiment != "ood" && cfg.experiment != "heads_dynamics") {
        throw ConfigError("config: unknown experiment '" + cfg.experiment + "'");
    }
    cfg.master_seed = required_field<uint64_t>(j, "seed");
    if (const char* env = std::getenv("ILM_MASTER_SEED")) {
        try {
            cfg.master_seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("ILM_MASTER_SEED is not a valid integer: '") + env + "'");
        }
    }

    const json corpus = field<json>(j, "corpus", json::object());
    cfg.n_content = field<int>(corpus, "n_content", cfg.n_content);
    cfg.n_pairs = field<int>(corpus, "n_pairs", cfg.n_pairs);
    cfg.n_markup = field<int>(corpus, "n_markup", cfg.n_markup);
    cfg.n_contexts = field<int>(corpus, "n_contexts", cfg.n_contexts);
    cfg.n_train_sentences = field<int>(corpus, "n_train_sentences", cfg.n_train_sentences);
    cfg.n_test_sentences = field<int>(corpus, "n_test_sentences", cfg.n_test_sentences);
    cfg.seq_len = field<int>(corpus, "seq_len", cfg.seq_len);
    cfg.markup_rate = field<double>(corpus, "markup_rate", cfg.markup_rate);
    cfg.pair_bias = field<double>(corpus, "pair_bias", cfg.pair_bias);
    cfg.p_split = field<double>(corpus, "p", cfg.p_split);
    cfg.overlap = field<double>(corpus, "overlap", cfg.overlap);
    cfg.n_domain_sets = field<int>(corpus, "n_domain_sets", cfg.n_domain_sets);
    cfg.equal_tokens = field<bool>(corpus, "equal_tokens", cfg.equal_tokens);

    const json model = field<json>(j, "model", json::object());
    cfg.model.embed_dim = field<int64_t>(model, "embed_dim", cfg.model.embed_dim);
    cfg.model.n_layers = field<int64_t>(model, "n_layers", cfg.model.n_layers);
    cfg.model.n_attn_heads = field<int64_t>(model, "n_attn_heads", cfg.model.n_attn_heads);
    cfg.model.ffn_dim = field<int64_t>(model, "ffn_dim", cfg.model.ffn_dim);
    cfg.model.max_seq_len = field<int64_t>(model, "max_seq_len", cfg.model.max_seq_len);
    const std::string ens = field<std::string>(model, "ensemble", "sum");
    if (ens == "sum") {
        cfg.model.ensemble = EnsembleMode::sum;
    } else if (ens == "mean") {
        cfg.model.ensemble = EnsembleMode::mean;
    } else {
        throw ConfigError("config: model.ensemble must be 'sum' or 'mean', got '" + ens + "'");
    }

    const json train = field<json>(j, "train", json::object());
    cfg.batch_size = field<int>(train, "batch_size", cfg.batch_size);
    cfg.mask_rate = field<double>(train, "mask_rate", cfg.mask_rate);
    const json adam = field<json>(train, "adam", json::object());
    cfg.adam_beta1 = field<float>(adam, "beta1", cfg.adam_beta1);
    cfg.adam_beta2 = field<float>(adam, "beta2", cfg.adam_beta2);
    cfg.adam_eps = field<float>(adam, "eps", cfg.adam_eps);
    cfg.checkpoint_every = field<int64_t>(train, "checkpoint_every", cfg.checkpoint_every);
    cfg.phi_update_period = field<int>(train, "phi_update_period", cfg.phi_update_period);

    const json grid = required_field<json>(j, "grid");
    cfg.learning_rates = required_field<std::vector<float>>(grid, "learning_rates");
    cfg.steps_grid = required_field<std::vector<int64_t>>(grid, "n_steps");
    cfg.n_envs_grid = field<std::vector<int>>(grid, "n_envs", {});
    cfg.n_restarts = field<int>(j, "n_restarts", cfg.n_restarts);

    if (j.contains("pretrain")) {
        const json pt = j.at("pretrain");
        cfg.pretrain.enabled = true;
        cfg.pretrain.n_steps = required_field<int64_t>(pt, "n_steps");
        cfg.pretrain.learning_rate = required_field<float>(pt, "learning_rate");
        cfg.pretrain.n_sentences = field<int>(pt, "n_sentences", cfg.pretrain.n_sentences);
    }
    const json eval_j = field<json>(j, "eval", json::object());
    cfg.eval_mask_rate = field<double>(eval_j, "mask_rate", cfg.eval_mask_rate);

    // validation
    if (cfg.learning_rates.empty() || cfg.steps_grid.empty()) {
        throw ConfigError("config: grid.learning_rates and grid.n_steps must be non-empty");
    }
    for (float lr : cfg.learning_rates) {
        if (!(lr > 0.0f)) {
            throw ConfigError("config: learning rates must be positive");
        }
    }
    for (int64_t s : cfg.steps_grid) {
        if (s < 0) {
            throw ConfigError("config: step counts must be >= 0");
        }
    }
    if (cfg.n_restarts < 1) {
        throw ConfigError("config: n_restarts must be >= 1");
    }
    if (!(cfg.mask_rate > 0.0 && cfg.mask_rate < 1.0) ||
        !(cfg.eval_mask_rate > 0.0 && cfg.eval_mask_rate < 1.0)) {
        throw ConfigError("config: mask rates must lie in (0,1)");
    }
    if (cfg.batch_size < 1) {
        throw ConfigError("config: train.batch_size must be >= 1");
    }
    if (cfg.phi_update_period < 1) {
        throw ConfigError("config: train.phi_update_period must be >= 1");
    }
    if (cfg.experiment == "ood") {
        if (cfg.n_envs_grid.empty()) {
            throw ConfigError("config: ood experiment requires grid.n_envs");
        }
        for (int n : cfg.n_envs_grid) {
            if (n < 2) {
                throw ConfigError("config: grid.n_envs entries must be >= 2");
            }
        }
        cfg.n_domains = *std::max_element(cfg.n_envs_grid.begin(), cfg.n_envs_grid.end()) + 1;
        if (cfg.n_domain_sets < 1) {
            throw ConfigError("config: corpus.n_domain_sets must be >= 1");
        }
    } else if (!cfg.n_envs_grid.empty()) {
        throw ConfigError("config: grid.n_envs is only valid for the ood experiment");
    }
    if (cfg.experiment == "structured_noise" && cfg.n_markup < 2) {
        throw ConfigError("config: structured_noise needs corpus.n_markup >= 2");
    }
    if (cfg.experiment == "correlation") {
        if (cfg.n_pairs < 1 || cfg.n_contexts < 1) {
            throw ConfigError("config: correlation needs corpus.n_pairs and corpus.n_contexts");
        }
        if (cfg.pretrain.enabled) {
            throw ConfigError("config: correlation experiment does not support pretraining");
        }
    }
    if (cfg.experiment == "heads_dynamics") {
        if (cfg.checkpoint_every < 1) {
            throw ConfigError("config: heads_dynamics needs train.checkpoint_every >= 1");
        }
        if (cfg.pretrain.enabled) {
            throw ConfigError("config: heads_dynamics does not support pretraining");
        }
    }
    return cfg;
}

std::vector<GridPoint> expand_grid(const ExperimentConfig& cfg) {
    std::vector<int> env_dims = cfg.n_envs_grid.empty() ? std::vector<int>{0} : cfg.n_envs_grid;
    std::vector<GridPoint> out;
    for (int ne : env_dims) {
        for (float lr : cfg.learning_rates) {
            for (int64_t steps : cfg.steps_grid) {
                out.push_back({lr, steps, ne});
            }
        }
    }
    return out;
}

std::string grid_point_hash(const ExperimentConfig& cfg, const GridPoint& gp) {
    json j;
    j["experiment"] = cfg.experiment;
    j["corpus"] = {{"n_content", cfg.n_content},
                   {"n_pairs", cfg.n_pairs},
                   {"n_markup", cfg.n_markup},
                   {"n_contexts", cfg.n_contexts},
                   {"n_train_sentences", cfg.n_train_sentences},
                   {"n_test_sentences", cfg.n_test_sentences},
                   {"seq_len", cfg.seq_len},
                   {"markup_rate", cfg.markup_rate},
                   {"pair_bias", cfg.pair_bias},
                   {"p", cfg.p_split},
                   {"overlap", cfg.overlap},
                   {"n_domain_sets", cfg.n_domain_sets},
                   {"equal_tokens", cfg.equal_tokens}};
    j["model"] = {{"embed_dim", cfg.model.embed_dim},
                  {"n_layers", cfg.model.n_layers},
                  {"n_attn_heads", cfg.model.n_attn_heads},
                  {"ffn_dim", cfg.model.ffn_dim},
                  {"max_seq_len", cfg.model.max_seq_len},
                  {"ensemble", cfg.model.ensemble == EnsembleMode::sum ? "sum" : "mean"}};
    j["train"] = {{"batch_size", cfg.batch_size},
                  {"mask_rate", cfg.mask_rate},
                  {"beta1", cfg.adam_beta1},
                  {"beta2", cfg.adam_beta2},
                  {"eps", cfg.adam_eps},
                  {"phi_update_period", cfg.phi_update_period}};
    j["pretrain"] = {{"enabled", cfg.pretrain.enabled},
                     {"n_steps", cfg.pretrain.n_steps},
                     {"learning_rate", cfg.pretrain.learning_rate},
                     {"n_sentences", cfg.pretrain.n_sentences}};
    j["grid"] = {{"learning_rate", gp.learning_rate},
                 {"n_steps", gp.n_steps},
                 {"n_envs", gp.n_envs}};
    return hash_hex(fnv1a64(j.dump()));
}

std::vector<RunSpec> build_manifest(const ExperimentConfig& cfg) {
    const auto grid = expand_grid(cfg);
    const bool paired = cfg.experiment != "heads_dynamics";
    std::vector<RunSpec> out;
    for (size_t g = 0; g < grid.size(); ++g) {
        const std::string hash = grid_point_hash(cfg, grid[g]);
        for (int r = 0; r < cfg.n_restarts; ++r) {
            const uint64_t seed = mix_seed(cfg.master_seed, "run", g, static_cast<uint64_t>(r));
            for (const char* variant : {"ilm", "elm"}) {
                if (!paired && std::string(variant) == "elm") {
                    continue;
                }
                RunSpec spec;
                spec.grid_index = static_cast<int>(g);
                spec.grid = grid[g];
                spec.variant = variant;
                spec.restart = r;
                spec.seed = seed;
                spec.config_hash = hash;
                char dir[64];
                std::snprintf(dir, sizeof(dir), "runs/g%02zu_%s_r%d", g, variant, r);
                spec.run_dir = dir;
                out.push_back(std::move(spec));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// data generation

namespace {

Vocabulary build_experiment_vocab(const ExperimentConfig& cfg) {
    return build_vocabulary(cfg.n_content, cfg.n_pairs, cfg.n_markup, data_seed(cfg));
}

void write_env(const std::string& path, const Environment& env, const std::string& vocab_hash) {
    write_file(path, env.to_json(vocab_hash));
}

int64_t token_count(const std::vector<std::vector<int32_t>>& seqs) {
    int64_t n = 0;
    for (const auto& s : seqs) {
        n += static_cast<int64_t>(s.size());
    }
    return n;
}

void check_max_seq_len(const ExperimentConfig& cfg,
                       const std::vector<std::vector<int32_t>>& seqs, const std::string& what) {
    size_t longest = 0;
    for (const auto& s : seqs) {
        longest = std::max(longest, s.size());
    }
    if (static_cast<int64_t>(longest) > cfg.model.max_seq_len) {
        throw ConfigError("generated " + what + " sequences reach length " +
                          std::to_string(longest) + " > model.max_seq_len " +
                          std::to_string(cfg.model.max_seq_len));
    }
}

} // namespace

void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
    const Vocabulary vocab = build_experiment_vocab(cfg);
    const std::string vh = vocab.hash();
    const std::string data_dir = out_dir + "/data";
    fs::create_directories(data_dir);
    write_file(data_dir + "/vocab.json", vocab.to_json());
    const uint64_t ds = data_seed(cfg);

    if (cfg.experiment == "structured_noise") {
        const MarkovChain chain = clean_corpus_chain(vocab, ds);
        auto clean = gen_from_chain(chain, 2 * cfg.n_train_sentences, cfg.seq_len,
                                    mix_seed(ds, "train"));
        Environment env_a{0, "clean", {clean.begin(), clean.begin() + cfg.n_train_sentences}};
        std::vector<std::vector<int32_t>> b_src(clean.begin() + cfg.n_train_sentences, clean.end());
        auto wrapped = wrap_with_markup(b_src, vocab, cfg.markup_rate, mix_seed(ds, "wrap"));
        Environment env_b{1, "markup", {}};
        if (cfg.equal_tokens) {
            // Match Env-A's token budget instead of its sentence count.
            const int64_t budget = token_count(env_a.sequences);
            int64_t used = 0;
            for (auto& s : wrapped) {
                if (used >= budget) {
                    break;
                }
                used += static_cast<int64_t>(s.size());
                env_b.sequences.push_back(std::move(s));
            }
        } else {
            env_b.sequences = std::move(wrapped);
        }
        Environment test{2, "test-clean",
                         gen_from_chain(chain, cfg.n_test_sentences, cfg.seq_len,
                                        mix_seed(ds, "test"))};
        check_max_seq_len(cfg, env_b.sequences, "markup");
        write_env(data_dir + "/train_env_0.json", env_a, vh);
        write_env(data_dir + "/train_env_1.json", env_b, vh);
        write_env(data_dir + "/test.json", test, vh);
    } else if (cfg.experiment == "correlation") {
        CorrelationSplitConfig cc{cfg.p_split, cfg.pair_bias, cfg.n_contexts,
                                  cfg.n_train_sentences, cfg.seq_len};
        auto [env_a, env_b] = gen_correlation_corpus(vocab, cc, ds);
        Environment test{2, "test-original",
                         gen_correlation_test(vocab, cc, cfg.n_test_sentences, ds)};
        write_env(data_dir + "/train_env_0.json", env_a, vh);
        write_env(data_dir + "/train_env_1.json", env_b, vh);
        write_env(data_dir + "/test.json", test, vh);
    } else if (cfg.experiment == "ood") {
        for (int s = 0; s < cfg.n_domain_sets; ++s) {
            const uint64_t set_seed = mix_seed(ds, "set", static_cast<uint64_t>(s));
            auto envs = gen_domain_envs(vocab, cfg.n_domains, cfg.n_train_sentences, cfg.seq_len,
                                        cfg.overlap, set_seed);
            const std::string set_dir = data_dir + "/set_" + std::to_string(s);
            for (int d = 0; d + 1 < cfg.n_domains; ++d) {
                write_env(set_dir + "/train_env_" + std::to_string(d) + ".json",
                          envs[static_cast<size_t>(d)], vh);
            }
            Environment test = std::move(envs.back());
            test.descriptor = "domain-test";
            write_env(set_dir + "/test.json", test, vh);
        }
    } else { // heads_dynamics
        auto base = gen_domain_envs(vocab, 2, cfg.n_train_sentences, cfg.seq_len, cfg.overlap, ds);
        const char* names[4] = {"A1", "A2", "B1", "B2"};
        for (int d = 0; d < 2; ++d) {
            auto& seqs = base[static_cast<size_t>(d)].sequences;
            const size_t half = seqs.size() / 2;
            Environment first{2 * d, names[2 * d],
                              {seqs.begin(), seqs.begin() + static_cast<std::ptrdiff_t>(half)}};
            Environment second{2 * d + 1, names[2 * d + 1],
                               {seqs.begin() + static_cast<std::ptrdiff_t>(half), seqs.end()}};
            write_env(data_dir + "/train_env_" + std::to_string(2 * d) + ".json", first, vh);
            write_env(data_dir + "/train_env_" + std::to_string(2 * d + 1) + ".json", second, vh);
        }
    }
}

// ---------------------------------------------------------------------------
// data loading

namespace {

struct RunData {
    Vocabulary vocab;
    std::vector<Environment> train_envs;
    std::vector<std::vector<int32_t>> test;
};

std::string set_dir_for(const ExperimentConfig& cfg, int restart) {
    if (cfg.experiment != "ood") {
        return "data";
    }
    return "data/set_" + std::to_string(restart % cfg.n_domain_sets);
}

Environment load_env(const std::string& path, const std::string& expect_hash) {
    std::string vh;
    Environment env = Environment::from_json(read_file(path), &vh);
    if (vh != expect_hash) {
        throw ConfigError("environment '" + path + "' was generated under a different vocabulary");
    }
    return env;
}

RunData load_run_data(const ExperimentConfig& cfg, const std::string& out_dir, int n_envs,
                      int restart, bool need_test) {
    RunData rd;
    rd.vocab = Vocabulary::from_json(read_file(out_dir + "/data/vocab.json"));
    const std::string vh = rd.vocab.hash();
    const std::string dir = out_dir + "/" + set_dir_for(cfg, restart);
    int count = n_envs;
    if (count <= 0) {
        count = 0;
        while (fs::exists(dir + "/train_env_" + std::to_string(count) + ".json")) {
            ++count;
        }
        if (count == 0) {
            throw IoError("no training environments under '" + dir + "' (run gen-data first)");
        }
    }
    for (int e = 0; e < count; ++e) {
        rd.train_envs.push_back(load_env(dir + "/train_env_" + std::to_string(e) + ".json", vh));
    }
    if (need_test) {
        rd.test = load_env(dir + "/test.json", vh).sequences;
    }
    return rd;
}

EncoderConfig model_config_for(const ExperimentConfig& cfg, const Vocabulary& vocab,
                               uint64_t seed) {
    EncoderConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    mc.seed = seed;
    mc.validate();
    return mc;
}

std::vector<std::vector<int32_t>> pretrain_corpus(const ExperimentConfig& cfg,
                                                  const Vocabulary& vocab, int restart) {
    const uint64_t ds = data_seed(cfg);
    if (cfg.experiment == "structured_noise") {
        const MarkovChain chain = clean_corpus_chain(vocab, ds);
        return gen_from_chain(chain, cfg.pretrain.n_sentences, cfg.seq_len,
                              mix_seed(ds, "pretrain"));
    }
    if (cfg.experiment == "ood") {
        const uint64_t set_seed =
            mix_seed(ds, "set", static_cast<uint64_t>(restart % cfg.n_domain_sets));
        const MarkovChain core = domain_core_chain(vocab, cfg.n_domains, cfg.overlap, set_seed);
        return gen_from_chain(core, cfg.pretrain.n_sentences, cfg.seq_len,
                              mix_seed(set_seed, "pretrain"));
    }
    throw ConfigError("pretraining is not defined for experiment '" + cfg.experiment + "'");
}

// Trains (or loads) the warm-start checkpoint for one restart.
InvariantModel ensure_pretrained(const ExperimentConfig& cfg, const std::string& out_dir,
                                 int restart, const Vocabulary& vocab) {
    const std::string path = out_dir + "/pretrain/r" + std::to_string(restart) + ".ilm1";
    if (!fs::exists(path)) {
        auto corpus = pretrain_corpus(cfg, vocab, restart);
        Environment env{0, "pretrain", std::move(corpus)};
        const EncoderConfig mc = model_config_for(
            cfg, vocab, mix_seed(cfg.master_seed, "pretrain-init", static_cast<uint64_t>(restart)));
        InvariantModel model = InvariantModel::init(mc, 1, InitMode::shared_head_copy);
        TrainConfig tc;
        tc.n_steps = cfg.pretrain.n_steps;
        tc.batch_size = cfg.batch_size;
        tc.learning_rate = cfg.pretrain.learning_rate;
        tc.adam_beta1 = cfg.adam_beta1;
        tc.adam_beta2 = cfg.adam_beta2;
        tc.adam_eps = cfg.adam_eps;
        tc.mask_rate = cfg.mask_rate;
        tc.seed = mix_seed(cfg.master_seed, "pretrain", static_cast<uint64_t>(restart));
        TrainResult result = train_erm(std::move(model), {env}, vocab, tc);
        fs::create_directories(out_dir + "/pretrain");
        save_checkpoint(path, result.model, cfg.pretrain.n_steps, vocab.hash());
        return std::move(result.model);
    }
    LoadedCheckpoint loaded = load_checkpoint(path);
    if (loaded.vocab_hash != vocab.hash()) {
        throw ConfigError("pretrain checkpoint '" + path + "' has a mismatched vocab hash");
    }
    return std::move(loaded.model);
}

RunSpec find_run(const ExperimentConfig& cfg, int grid_index, const std::string& variant,
                 int restart) {
    for (const RunSpec& spec : build_manifest(cfg)) {
        if (spec.grid_index == grid_index && spec.variant == variant && spec.restart == restart) {
            return spec;
        }
    }
    throw ConfigError("no manifest entry for grid point " + std::to_string(grid_index) +
                      ", variant '" + variant + "', restart " + std::to_string(restart));
}

} // namespace

void cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, int grid_index,
               const std::string& variant, int restart) {
    const RunSpec spec = find_run(cfg, grid_index, variant, restart);
    const std::string run_dir = out_dir + "/" + spec.run_dir;
    if (fs::exists(run_dir + "/checkpoint.ilm1") && fs::exists(run_dir + "/run.json")) {
        return; // complete run, reuse
    }
    const int n_envs_wanted = spec.grid.n_envs;
    RunData rd = load_run_data(cfg, out_dir, n_envs_wanted, restart, /*need_test=*/false);
    const int n_envs = static_cast<int>(rd.train_envs.size());

    try {
        fs::create_directories(run_dir);
        InvariantModel model;
        if (cfg.pretrain.enabled) {
            InvariantModel base = ensure_pretrained(cfg, out_dir, restart, rd.vocab);
            model = variant == "ilm" ? base.with_replicated_heads(n_envs) : std::move(base);
        } else {
            const EncoderConfig mc = model_config_for(cfg, rd.vocab, spec.seed);
            model = InvariantModel::init(mc, variant == "ilm" ? n_envs : 1,
                                         InitMode::shared_head_copy);
        }

        TrainConfig tc;
        tc.n_steps = spec.grid.n_steps;
        tc.batch_size = cfg.batch_size;
        tc.learning_rate = spec.grid.learning_rate;
        tc.adam_beta1 = cfg.adam_beta1;
        tc.adam_beta2 = cfg.adam_beta2;
        tc.adam_eps = cfg.adam_eps;
        tc.mask_rate = cfg.mask_rate;
        tc.seed = spec.seed;
        tc.phi_update_period = cfg.phi_update_period;
        tc.checkpoint_every = cfg.checkpoint_every;

        CheckpointHook hook = nullptr;
        if (cfg.checkpoint_every > 0) {
            fs::create_directories(run_dir + "/checkpoints");
            hook = [&](int64_t step, const InvariantModel& m) {
                save_checkpoint(run_dir + "/checkpoints/step_" + std::to_string(step) + ".ilm1", m,
                                step, rd.vocab.hash());
            };
        }

        TrainResult result = variant == "ilm"
                                 ? train_irm_games(std::move(model), rd.train_envs, rd.vocab, tc, hook)
                                 : train_erm(std::move(model), rd.train_envs, rd.vocab, tc, hook);

        result.log.write_csv(run_dir + "/trainlog.csv");
        save_checkpoint(run_dir + "/checkpoint.ilm1", result.model, spec.grid.n_steps,
                        rd.vocab.hash());
        json meta;
        meta["experiment"] = cfg.experiment;
        meta["variant"] = variant;
        meta["grid_index"] = grid_index;
        meta["restart"] = restart;
        meta["seed"] = spec.seed;
        meta["config_hash"] = spec.config_hash;
        meta["learning_rate"] = spec.grid.learning_rate;
        meta["n_steps"] = spec.grid.n_steps;
        meta["n_envs"] = n_envs;
        write_file(run_dir + "/run.json", meta.dump(2) + "\n");
    } catch (...) {
        // Leave no partial run behind.
        std::error_code ec;
        fs::remove_all(run_dir, ec);
        throw;
    }
}

// ---------------------------------------------------------------------------
// evaluation

std::vector<MetricsRecord> eval_run(const ExperimentConfig& cfg, const std::string& out_dir,
                                    const RunSpec& run) {
    const std::string run_dir = out_dir + "/" + run.run_dir;
    LoadedCheckpoint loaded = load_checkpoint(run_dir + "/checkpoint.ilm1");
    RunData rd = load_run_data(cfg, out_dir, /*n_envs=*/0, run.restart, /*need_test=*/
                               cfg.experiment != "heads_dynamics");
    if (loaded.vocab_hash != rd.vocab.hash()) {
        throw ConfigError("checkpoint '" + run_dir +
                          "/checkpoint.ilm1' has a vocab hash mismatching the data directory");
    }
    std::vector<MetricsRecord> rows;
    auto make_row = [&](const std::string& metric, double value) {
        MetricsRecord r;
        r.experiment = cfg.experiment;
        r.variant = run.variant;
        r.config_hash = run.config_hash;
        r.seed = run.seed;
        r.steps = run.grid.n_steps;
        r.metric = metric;
        r.value = value;
        return r;
    };
    if (cfg.experiment == "structured_noise" || cfg.experiment == "ood") {
        rows.push_back(make_row("perplexity", perplexity(loaded.model, rd.test, rd.vocab,
                                                         cfg.eval_mask_rate, eval_seed(cfg))));
    } else if (cfg.experiment == "correlation") {
        rows.push_back(
            make_row("entropy_bias", entropy_bias(loaded.model, rd.test, rd.vocab).mean_bias));
        rows.push_back(make_row("perplexity", perplexity(loaded.model, rd.test, rd.vocab,
                                                         cfg.eval_mask_rate, eval_seed(cfg))));
    }
    return rows;
}

void cmd_eval_all(const ExperimentConfig& cfg, const std::string& out_dir) {
    const auto manifest = build_manifest(cfg);
    std::vector<MetricsRecord> all;
    for (const RunSpec& spec : manifest) {
        auto rows = eval_run(cfg, out_dir, spec);
        all.insert(all.end(), rows.begin(), rows.end());
    }
    write_metrics_csv(out_dir + "/metrics.csv", all, /*append=*/false);
}

// ---------------------------------------------------------------------------
// compare & report

namespace {

struct PairedValues {
    GridPoint grid;
    uint64_t seed = 0;
    double ilm = 0.0;
    double elm = 0.0;
};

struct Aggregate {
    double mean = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

Aggregate aggregate(std::span<const double> values, uint64_t seed) {
    Aggregate a;
    double acc = 0.0;
    for (double v : values) {
        acc += v;
    }
    a.mean = acc / static_cast<double>(values.size());
    if (values.size() >= 2) {
        const auto [lo, hi] = bootstrap_ci(values, kBootstrapResamples, kBootstrapLevel, seed);
        a.ci_low = lo;
        a.ci_high = hi;
    } else {
        a.ci_low = a.ci_high = a.mean;
    }
    return a;
}

json aggregate_json(const Aggregate& a) {
    return {{"mean", a.mean}, {"ci_low", a.ci_low}, {"ci_high", a.ci_high}};
}

std::vector<double> win_values(std::span<const PairedValues> pairs, bool lower_is_better) {
    std::vector<double> out;
    for (const PairedValues& p : pairs) {
        if (p.ilm == p.elm) {
            out.push_back(0.5);
        } else {
            out.push_back(((p.ilm < p.elm) == lower_is_better) ? 1.0 : 0.0);
        }
    }
    return out;
}

} // namespace

void cmd_compare(const ExperimentConfig& cfg, const std::string& out_dir) {
    if (cfg.experiment == "heads_dynamics") {
        throw ConfigError("compare is not defined for heads_dynamics (use the heads command)");
    }
    const std::string primary = cfg.experiment == "correlation" ? "entropy_bias" : "perplexity";
    const auto records = read_metrics_csv(out_dir + "/metrics.csv");

    std::map<std::pair<std::string, uint64_t>, std::map<std::string, double>> by_key;
    std::map<std::pair<std::string, uint64_t>, std::map<std::string, double>> ppl_by_key;
    for (const MetricsRecord& r : records) {
        if (r.experiment != cfg.experiment) {
            continue;
        }
        if (r.metric == primary) {
            by_key[{r.config_hash, r.seed}][r.variant] = r.value;
        }
        if (r.metric == "perplexity") {
            ppl_by_key[{r.config_hash, r.seed}][r.variant] = r.value;
        }
    }

    const auto grid = expand_grid(cfg);
    std::vector<PairedValues> pairs;
    std::vector<double> ppl_ilm, ppl_elm;
    json unmatched = json::array();
    for (size_t g = 0; g < grid.size(); ++g) {
        const std::string hash = grid_point_hash(cfg, grid[g]);
        for (int r = 0; r < cfg.n_restarts; ++r) {
            const uint64_t seed = mix_seed(cfg.master_seed, "run", g, static_cast<uint64_t>(r));
            const auto it = by_key.find({hash, seed});
            if (it == by_key.end() || it->second.count("ilm") + it->second.count("elm") < 2) {
                unmatched.push_back({{"config_hash", hash}, {"seed", seed}});
                continue;
            }
            pairs.push_back({grid[g], seed, it->second.at("ilm"), it->second.at("elm")});
            const auto pit = ppl_by_key.find({hash, seed});
            if (pit != ppl_by_key.end() && pit->second.count("ilm") && pit->second.count("elm")) {
                ppl_ilm.push_back(pit->second.at("ilm"));
                ppl_elm.push_back(pit->second.at("elm"));
            }
        }
    }
    if (!unmatched.empty()) {
        std::fprintf(stderr, "warning: %zu unmatched ilm/elm entries excluded from comparison\n",
                     unmatched.size());
    }
    if (pairs.empty()) {
        throw ContractError("compare: no matched ilm/elm pairs in " + out_dir + "/metrics.csv");
    }

    const uint64_t rs = mix_seed(cfg.master_seed, "report");
    std::vector<double> ilm_vals, elm_vals;
    for (const PairedValues& p : pairs) {
        ilm_vals.push_back(p.ilm);
        elm_vals.push_back(p.elm);
    }
    const Aggregate overall_ilm = aggregate(ilm_vals, mix_seed(rs, 1));
    const Aggregate overall_elm = aggregate(elm_vals, mix_seed(rs, 2));
    const auto wins = win_values(pairs, /*lower_is_better=*/true);
    const Aggregate win_overall = aggregate(wins, mix_seed(rs, 3));

    json report;
    report["experiment"] = cfg.experiment;
    report["metric"] = primary;
    report["n_pairs"] = pairs.size();
    report["unmatched"] = unmatched;
    report["overall"] = {{"ilm", aggregate_json(overall_ilm)}, {"elm", aggregate_json(overall_elm)}};
    report["win_probability"] = {{"overall", {{"value", win_overall.mean},
                                              {"ci_low", win_overall.ci_low},
                                              {"ci_high", win_overall.ci_high},
                                              {"n_pairs", pairs.size()}}}};

    const std::string report_dir = out_dir + "/report";
    fs::create_directories(report_dir);

    // panel a: overall means
    {
        std::string csv = "variant,mean,ci_low,ci_high\n";
        csv += "ilm," + fmt_double(overall_ilm.mean) + "," + fmt_double(overall_ilm.ci_low) + "," +
               fmt_double(overall_ilm.ci_high) + "\n";
        csv += "elm," + fmt_double(overall_elm.mean) + "," + fmt_double(overall_elm.ci_low) + "," +
               fmt_double(overall_elm.ci_high) + "\n";
        write_file(report_dir + "/panel_overall.csv", csv);
        write_file(report_dir + "/panel_overall.svg",
                   svg::bar_chart("mean " + primary + " (95% bootstrap CI)", primary,
                                  {"iLM", "eLM"}, {overall_ilm.mean, overall_elm.mean},
                                  {{overall_ilm.ci_low, overall_ilm.ci_high},
                                   {overall_elm.ci_low, overall_elm.ci_high}}));
    }

    // panel b: mean vs training steps
    {
        std::vector<int64_t> steps_values;
        for (const GridPoint& gp : grid) {
            if (std::find(steps_values.begin(), steps_values.end(), gp.n_steps) ==
                steps_values.end()) {
                steps_values.push_back(gp.n_steps);
            }
        }
        std::sort(steps_values.begin(), steps_values.end());
        std::string csv = "steps,variant,mean,ci_low,ci_high\n";
        json by_steps = json::array();
        svg::Series s_ilm{"iLM", "#d9541e", {}};
        svg::Series s_elm{"eLM", "#4878cf", {}};
        for (int64_t steps : steps_values) {
            std::vector<double> vi, ve;
            for (const PairedValues& p : pairs) {
                if (p.grid.n_steps == steps) {
                    vi.push_back(p.ilm);
                    ve.push_back(p.elm);
                }
            }
            if (vi.empty()) {
                continue;
            }
            const Aggregate ai = aggregate(vi, mix_seed(rs, 4, static_cast<uint64_t>(steps)));
            const Aggregate ae = aggregate(ve, mix_seed(rs, 5, static_cast<uint64_t>(steps)));
            by_steps.push_back(
                {{"steps", steps}, {"ilm", aggregate_json(ai)}, {"elm", aggregate_json(ae)}});
            csv += std::to_string(steps) + ",ilm," + fmt_double(ai.mean) + "," +
                   fmt_double(ai.ci_low) + "," + fmt_double(ai.ci_high) + "\n";
            csv += std::to_string(steps) + ",elm," + fmt_double(ae.mean) + "," +
                   fmt_double(ae.ci_low) + "," + fmt_double(ae.ci_high) + "\n";
            s_ilm.points.push_back({static_cast<double>(steps), ai.mean});
            s_elm.points.push_back({static_cast<double>(steps), ae.mean});
        }
        report["by_steps"] = by_steps;
        write_file(report_dir + "/panel_vs_steps.csv", csv);
        write_file(report_dir + "/panel_vs_steps.svg",
                   svg::line_chart("mean " + primary + " vs training steps", "training steps",
                                   primary, {s_ilm, s_elm}));
    }

    // panel c: paired win probability (overall, by steps, by n_envs)
    {
        std::string csv = "group,key,win_prob,ci_low,ci_high,n_pairs\n";
        csv += "overall,," + fmt_double(win_overall.mean) + "," + fmt_double(win_overall.ci_low) +
               "," + fmt_double(win_overall.ci_high) + "," + std::to_string(pairs.size()) + "\n";
        json wp_by_steps = json::array();
        std::vector<int64_t> steps_values;
        for (const PairedValues& p : pairs) {
            if (std::find(steps_values.begin(), steps_values.end(), p.grid.n_steps) ==
                steps_values.end()) {
                steps_values.push_back(p.grid.n_steps);
            }
        }
        std::sort(steps_values.begin(), steps_values.end());
        for (int64_t steps : steps_values) {
            std::vector<PairedValues> sub;
            for (const PairedValues& p : pairs) {
                if (p.grid.n_steps == steps) {
                    sub.push_back(p);
                }
            }
            const auto w = win_values(sub, true);
            const Aggregate a = aggregate(w, mix_seed(rs, 6, static_cast<uint64_t>(steps)));
            wp_by_steps.push_back({{"steps", steps},
                                   {"value", a.mean},
                                   {"ci_low", a.ci_low},
                                   {"ci_high", a.ci_high},
                                   {"n_pairs", sub.size()}});
            csv += "steps," + std::to_string(steps) + "," + fmt_double(a.mean) + "," +
                   fmt_double(a.ci_low) + "," + fmt_double(a.ci_high) + "," +
                   std::to_string(sub.size()) + "\n";
        }
        report["win_probability"]["by_steps"] = wp_by_steps;
        if (!cfg.n_envs_grid.empty()) {
            json wp_by_envs = json::array();
            std::vector<int> env_values = cfg.n_envs_grid;
            std::sort(env_values.begin(), env_values.end());
            for (int ne : env_values) {
                std::vector<PairedValues> sub;
                for (const PairedValues& p : pairs) {
                    if (p.grid.n_envs == ne) {
                        sub.push_back(p);
                    }
                }
                if (sub.empty()) {
                    continue;
                }
                const auto w = win_values(sub, true);
                const Aggregate a = aggregate(w, mix_seed(rs, 7, static_cast<uint64_t>(ne)));
                wp_by_envs.push_back({{"n_envs", ne},
                                      {"value", a.mean},
                                      {"ci_low", a.ci_low},
                                      {"ci_high", a.ci_high},
                                      {"n_pairs", sub.size()}});
                csv += "n_envs," + std::to_string(ne) + "," + fmt_double(a.mean) + "," +
                       fmt_double(a.ci_low) + "," + fmt_double(a.ci_high) + "," +
                       std::to_string(sub.size()) + "\n";
            }
            report["win_probability"]["by_n_envs"] = wp_by_envs;
        }
        write_file(report_dir + "/panel_win_prob.csv", csv);
    }

    // correlation: perplexity parity alongside the bias comparison
    if (cfg.experiment == "correlation" && !ppl_ilm.empty()) {
        const Aggregate pi = aggregate(ppl_ilm, mix_seed(rs, 8));
        const Aggregate pe = aggregate(ppl_elm, mix_seed(rs, 9));
        const double rel = std::abs(pi.mean - pe.mean) / pe.mean;
        report["perplexity_parity"] = {{"ilm", aggregate_json(pi)},
                                       {"elm", aggregate_json(pe)},
                                       {"relative_difference", rel}};
    }

    write_file(report_dir + "/report.json", report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// heads dynamics

namespace {

struct HeadsSeries {
    std::vector<int64_t> steps;
    std::vector<double> d_in;
    std::vector<double> d_out;
};

HeadsSeries heads_series_for_checkpoints(const std::vector<std::string>& paths,
                                         std::span<const int> grouping) {
    HeadsSeries series;
    for (const std::string& path : paths) {
        LoadedCheckpoint loaded = load_checkpoint(path);
        const DistMatrix dist = head_distances(loaded.model);
        const auto [din, dout] = d_in_d_out(dist, grouping);
        series.steps.push_back(loaded.step);
        series.d_in.push_back(din);
        series.d_out.push_back(dout);
    }
    return series;
}

void write_heads_series_csv(const std::string& path, const HeadsSeries& s) {
    std::string csv = "step,d_in,d_out\n";
    for (size_t i = 0; i < s.steps.size(); ++i) {
        csv += std::to_string(s.steps[i]) + "," + fmt_double(s.d_in[i]) + "," +
               fmt_double(s.d_out[i]) + "\n";
    }
    write_file(path, csv);
}

void write_mds_csv(const std::string& path, const InvariantModel& model,
                   const std::vector<std::string>& labels) {
    const DistMatrix dist = head_distances(model);
    const auto coords = classical_mds(dist, 2);
    std::string csv = "env_id,label,x,y\n";
    for (int e = 0; e < dist.n; ++e) {
        csv += std::to_string(e) + "," + labels[static_cast<size_t>(e)] + "," +
               fmt_double(coords[static_cast<size_t>(e)][0]) + "," +
               fmt_double(coords[static_cast<size_t>(e)][1]) + "\n";
    }
    write_file(path, csv);
}

std::vector<std::string> run_checkpoint_paths(const std::string& run_dir) {
    std::vector<std::pair<int64_t, std::string>> found;
    const std::string dir = run_dir + "/checkpoints";
    if (!fs::exists(dir)) {
        throw IoError("no checkpoints under '" + dir + "'");
    }
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("step_", 0) == 0 && name.size() > 10) {
            found.emplace_back(std::stoll(name.substr(5, name.size() - 10)),
                               entry.path().string());
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<std::string> out;
    for (auto& [step, path] : found) {
        out.push_back(std::move(path));
    }
    return out;
}

} // namespace

void cmd_heads_files(const std::vector<std::string>& checkpoint_paths,
                     const std::vector<int>& grouping, const std::string& series_csv,
                     const std::string& mds_csv) {
    if (checkpoint_paths.empty()) {
        throw ContractError("heads: no checkpoints given");
    }
    const HeadsSeries series = heads_series_for_checkpoints(checkpoint_paths, grouping);
    write_heads_series_csv(series_csv, series);
    if (!mds_csv.empty()) {
        LoadedCheckpoint last = load_checkpoint(checkpoint_paths.back());
        std::vector<std::string> labels;
        for (int e = 0; e < last.model.n_heads(); ++e) {
            labels.push_back("env" + std::to_string(e) + "/domain" +
                             std::to_string(grouping[static_cast<size_t>(e)]));
        }
        write_mds_csv(mds_csv, last.model, labels);
    }
}

void cmd_heads(const ExperimentConfig& cfg, const std::string& out_dir) {
    if (cfg.experiment != "heads_dynamics") {
        throw ConfigError("the heads command needs a heads_dynamics config");
    }
    const std::vector<int> grouping = {0, 0, 1, 1};
    const std::vector<std::string> labels = {"A1", "A2", "B1", "B2"};
    const auto manifest = build_manifest(cfg);

    std::vector<HeadsSeries> all_series;
    for (const RunSpec& spec : manifest) {
        const std::string run_dir = out_dir + "/" + spec.run_dir;
        const auto paths = run_checkpoint_paths(run_dir);
        HeadsSeries series = heads_series_for_checkpoints(paths, grouping);
        write_heads_series_csv(run_dir + "/head_distance_series.csv", series);
        all_series.push_back(std::move(series));
    }

    const std::string report_dir = out_dir + "/report";
    fs::create_directories(report_dir);
    const uint64_t rs = mix_seed(cfg.master_seed, "report");

    // Aggregate restarts checkpoint-by-checkpoint (all runs share the
    // checkpoint schedule).
    std::string csv = "step,d_in_mean,d_in_ci_low,d_in_ci_high,d_out_mean,d_out_ci_low,d_out_ci_high\n";
    svg::Series s_in{"D_in", "#d9541e", {}};
    svg::Series s_out{"D_out", "#4878cf", {}};
    const size_t n_points = all_series.front().steps.size();
    for (size_t i = 0; i < n_points; ++i) {
        std::vector<double> din, dout;
        for (const HeadsSeries& s : all_series) {
            if (i < s.steps.size()) {
                din.push_back(s.d_in[i]);
                dout.push_back(s.d_out[i]);
            }
        }
        const int64_t step = all_series.front().steps[i];
        const Aggregate ai = din.size() >= 2
                                 ? aggregate(din, mix_seed(rs, 10, static_cast<uint64_t>(step)))
                                 : Aggregate{din[0], din[0], din[0]};
        const Aggregate ao = dout.size() >= 2
                                 ? aggregate(dout, mix_seed(rs, 11, static_cast<uint64_t>(step)))
                                 : Aggregate{dout[0], dout[0], dout[0]};
        csv += std::to_string(step) + "," + fmt_double(ai.mean) + "," + fmt_double(ai.ci_low) +
               "," + fmt_double(ai.ci_high) + "," + fmt_double(ao.mean) + "," +
               fmt_double(ao.ci_low) + "," + fmt_double(ao.ci_high) + "\n";
        s_in.points.push_back({static_cast<double>(step), ai.mean});
        s_out.points.push_back({static_cast<double>(step), ao.mean});
    }
    write_file(report_dir + "/heads_series.csv", csv);
    write_file(report_dir + "/heads_series.svg",
               svg::line_chart("head weight distance, within vs across domains", "training steps",
                               "L2 distance", {s_in, s_out}));

    // MDS of the final checkpoint of restart 0.
    const auto paths0 = run_checkpoint_paths(out_dir + "/" + manifest.front().run_dir);
    LoadedCheckpoint last = load_checkpoint(paths0.back());
    write_mds_csv(report_dir + "/mds.csv", last.model, labels);
}

// ---------------------------------------------------------------------------
// run-all

int run_all(const ExperimentConfig& cfg, const std::string& out_dir, int jobs) {
    cmd_gen_data(cfg, out_dir);

    if (cfg.pretrain.enabled) {
        const Vocabulary vocab = Vocabulary::from_json(read_file(out_dir + "/data/vocab.json"));
        for (int r = 0; r < cfg.n_restarts; ++r) {
            ensure_pretrained(cfg, out_dir, r, vocab);
        }
    }

    const auto manifest = build_manifest(cfg);
    std::atomic<size_t> next{0};
    std::mutex mu;
    std::vector<std::string> failures;
    auto worker = [&] {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= manifest.size()) {
                return;
            }
            const RunSpec& spec = manifest[i];
            try {
                cmd_train(cfg, out_dir, spec.grid_index, spec.variant, spec.restart);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(mu);
                failures.push_back(spec.run_dir + ": " + e.what());
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(manifest.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) {
        pool.emplace_back(worker);
    }
    for (std::thread& t : pool) {
        t.join();
    }
    if (!failures.empty()) {
        for (const std::string& f : failures) {
            std::fprintf(stderr, "run failed: %s\n", f.c_str());
        }
        return 2;
    }

    if (cfg.experiment == "heads_dynamics") {
        cmd_heads(cfg, out_dir);
    } else {
        cmd_eval_all(cfg, out_dir);
        cmd_compare(cfg, out_dir);
    }
    return 0;
}

} // namespace ilm::harness
