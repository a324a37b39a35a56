// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/cli.hpp>

#include <cpmtp/corpus.hpp>
#include <cpmtp/errors.hpp>
#include <cpmtp/model.hpp>
#include <cpmtp/oracles.hpp>
#include <cpmtp/parallel.hpp>
#include <cpmtp/sampler.hpp>
#include <cpmtp/speculative.hpp>
#include <cpmtp/training.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpmtp {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot read JSON file: " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j)
{
    std::ofstream out(path);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
}

std::string config_value(const json& v)
{
    if (v.is_string()) {
        return v.get<std::string>();
    }
    if (v.is_boolean()) {
        return v.get<bool>() ? "true" : "false";
    }
    if (v.is_array()) {
        std::string s;
        for (const auto& item : v) {
            if (!s.empty()) {
                s += ',';
            }
            s += config_value(item);
        }
        return s;
    }
    if (v.is_number()) {
        return v.dump();
    }
    throw UsageError("unsupported config value: " + v.dump());
}

/// Arguments contributed by --config for options absent from the command line.
std::vector<std::string> config_arguments(CLI::App& sub, const fs::path& path)
{
    const json cfg = read_json(path);
    if (!cfg.is_object()) {
        throw UsageError("config file must hold a JSON object");
    }
    std::vector<std::string> extra;
    for (const auto& [key, value] : cfg.items()) {
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* opt = key == "config" ? nullptr : sub.get_option_no_throw("--" + flag);
        if (opt == nullptr) {
            throw UsageError("unknown config key '" + key + "' for command " + sub.get_name());
        }
        if (opt->count() == 0) {
            extra.push_back("--" + flag);
            extra.push_back(config_value(value));
        }
    }
    return extra;
}

std::string with_rank(const std::string& path, int rank, bool sweep)
{
    if (const auto pos = path.find("{rank}"); pos != std::string::npos) {
        return path.substr(0, pos) + std::to_string(rank) + path.substr(pos + 6);
    }
    if (!sweep) {
        return path;
    }
    fs::path p(path);
    const std::string stem = p.stem().string() + ".r" + std::to_string(rank);
    return (p.parent_path() / (stem + p.extension().string())).string();
}

std::optional<Token> boundary_of(int flag)
{
    return flag >= 0 ? std::optional<Token>(flag) : std::nullopt;
}

struct GenDataArgs {
    std::string source = "markov";
    std::string chain = "sparse";
    int vocab = 32;
    int order = 1;
    int support = 4;
    double floor = 0.0;
    std::size_t length = 200'000;
    std::uint64_t seed = 0;
    std::string input;
    std::string vocab_in;
    std::string unknown = "error";
    std::string separator;
    int boundary = -1;
    std::string out;
    std::string spec_out;
    std::string vocab_out;
};

struct TrainArgs {
    std::string data;
    std::string spec;
    int boundary = -1;
    double validation_fraction = 0.1;
    std::vector<int> ranks{4};
    int horizon = 2;
    int embed = 64;
    double decay = 0.7;
    double aux_coefficient = 0.1;
    double distill_beta = 0.9;
    double discount = 0.9;
    double learning_rate = 1e-2;
    int warmup_steps = 0;
    int batch_size = 64;
    int steps = 1000;
    int context = 16;
    std::uint64_t seed = 0;
    bool train_encoder = true;
    int threads = 0;
    std::size_t eval_windows = 0;
    std::string base;
    double adapter_noise = 0.0;
    std::string out;
    std::string metrics;
    std::string summary;
};

struct SampleArgs {
    std::string checkpoint;
    std::vector<int> prompt;
    std::string text;
    std::string vocab;
    int max_tokens = 32;
    std::string mode = "greedy";
    double temperature = 1.0;
    std::vector<int> branching;
    std::uint64_t seed = 0;
    std::string out;
};

struct BenchArgs {
    std::string checkpoint;
    std::string data;
    int boundary = -1;
    double validation_fraction = 0.1;
    int prompts = 100;
    int prompt_length = 16;
    int max_tokens = 64;
    std::string mode = "greedy";
    double temperature = 1.0;
    std::vector<int> branching{5};
    std::uint64_t seed = 0;
    std::string out;
};

struct VerifyArgs {
    oracle::VerifyOptions options;
    std::string out;
};

void add_training_options(CLI::App* sub, TrainArgs& a)
{
    sub->add_option("--data", a.data, "Token file")->required();
    sub->add_option("--boundary", a.boundary, "Document boundary token id");
    sub->add_option("--validation-fraction", a.validation_fraction, "Held-out fraction per document");
    sub->add_option("--rank", a.ranks, "CP rank, or a comma-separated sweep")->delimiter(',');
    sub->add_option("--horizon", a.horizon, "Predicted tokens n");
    sub->add_option("--aux-coefficient", a.aux_coefficient, "Balance penalty weight");
    sub->add_option("--learning-rate", a.learning_rate);
    sub->add_option("--warmup-steps", a.warmup_steps);
    sub->add_option("--batch-size", a.batch_size);
    sub->add_option("--steps", a.steps);
    sub->add_option("--context", a.context, "Maximum context length");
    sub->add_option("--seed", a.seed);
    sub->add_option("--threads", a.threads, "Worker threads (falls back to CP_SPEC_THREADS)");
    sub->add_option("--eval-windows", a.eval_windows, "Validation windows to score, 0 = all");
    sub->add_option("--out", a.out, "Checkpoint path; {rank} expands per rank")->required();
    sub->add_option("--metrics", a.metrics, "Per-step metrics JSONL path");
    sub->add_option("--summary", a.summary, "Final evaluation JSON path");
}

TrainConfig make_train_config(const TrainArgs& a, Mode mode, int rank)
{
    TrainConfig c;
    c.mode = mode;
    c.rank = rank;
    c.horizon = a.horizon;
    c.aux_coefficient = a.aux_coefficient;
    c.distill_beta = a.distill_beta;
    c.discount = a.discount;
    c.learning_rate = a.learning_rate;
    c.warmup_steps = a.warmup_steps;
    c.batch_size = a.batch_size;
    c.steps = a.steps;
    c.context = a.context;
    c.seed = a.seed;
    c.train_encoder = a.train_encoder;
    c.threads = static_cast<int>(resolve_threads(a.threads));
    try {
        c.check();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

int cmd_gen_data(const GenDataArgs& a, std::ostream& out)
{
    if (a.source == "markov") {
        MarkovSpec spec;
        if (a.chain == "uniform") {
            spec = uniform_markov(a.vocab, a.order, a.seed);
        } else if (a.order != 1) {
            throw UsageError("only the uniform chain supports --order other than 1");
        } else if (a.chain == "cycle") {
            spec = cycle_markov(a.vocab, a.seed);
        } else if (a.chain == "random") {
            spec = random_markov(a.vocab, a.seed);
        } else if (a.chain == "unigram") {
            spec = unigram_markov(a.vocab, a.seed);
        } else if (a.chain == "sparse") {
            spec = sparse_markov(a.vocab, a.support, a.seed, a.floor);
        } else {
            throw UsageError("unknown chain '" + a.chain + "'");
        }
        const Corpus corpus = generate_markov(spec, a.length);
        write_token_file(corpus, a.out);
        if (!a.spec_out.empty()) {
            write_json(a.spec_out, json(spec));
        }
        out << "wrote " << corpus.total_tokens() << " tokens (V=" << spec.vocab << ", chain=" << a.chain
            << ") to " << a.out << '\n';
        return kExitOk;
    }
    if (a.source == "text") {
        if (a.input.empty()) {
            throw UsageError("--input is required for --source text");
        }
        TextOptions opts;
        opts.document_separator = a.separator;
        opts.unknown = a.unknown == "map" ? UnknownPolicy::MapToUnknown : UnknownPolicy::Error;
        Vocab vocab;
        if (!a.vocab_in.empty()) {
            vocab = read_json(a.vocab_in).get<Vocab>();
        }
        Corpus corpus = load_text(a.input, vocab, opts);
        int boundary = a.boundary;
        if (boundary < 0 && corpus.documents.size() > 1) {
            boundary = vocab.size();
        }
        if (boundary > vocab.size()) {
            throw UsageError("--boundary must lie in [0, V] for text corpora (V = " + std::to_string(vocab.size()) +
                             ")");
        }
        if (boundary == vocab.size()) {
            corpus.vocab = vocab.size() + 1;
        }
        write_token_file(corpus, a.out, boundary_of(boundary));
        if (!a.vocab_out.empty()) {
            write_json(a.vocab_out, json(vocab));
        }
        out << "wrote " << corpus.total_tokens() << " tokens in " << corpus.documents.size()
            << " documents (V=" << corpus.vocab << (boundary >= 0 ? ", boundary " + std::to_string(boundary) : "")
            << ") to " << a.out << '\n';
        return kExitOk;
    }
    throw UsageError("unknown --source '" + a.source + "'");
}

json eval_json(const Model& model, const Corpus& corpus, int context, std::size_t max_windows)
{
    const EvalMetrics m = evaluate(model, corpus, Split::Validation, context, max_windows);
    return {{"val_joint_nll", m.joint_nll},
            {"val_first_token_nll", m.first_token_nll},
            {"val_windows", m.windows},
            {"utilization", m.balance.utilization()},
            {"max_utilization", m.balance.max_utilization()}};
}

int run_training(const TrainArgs& a, Mode mode, std::ostream& out)
{
    const Corpus corpus = read_token_file(a.data, boundary_of(a.boundary), a.validation_fraction);
    std::optional<MarkovSpec> spec;
    if (!a.spec.empty()) {
        spec = read_json(a.spec).get<MarkovSpec>();
    }
    std::optional<Model> base;
    if (mode == Mode::Finetune) {
        base = load_checkpoint(a.base);
    }
    std::vector<TrainConfig> configs;
    for (int r : a.ranks) {
        configs.push_back(make_train_config(a, mode, r));
    }
    const bool sweep = a.ranks.size() > 1;
    json summary = json::array();
    for (const TrainConfig& cfg : configs) {
        Model model = mode == Mode::Scratch
                          ? make_scratch_model({{cfg.horizon, cfg.rank, corpus.vocab, a.embed}, a.decay, 1.0}, cfg.seed)
                          : make_finetune_model(*base, cfg.horizon, cfg.rank, cfg.seed, a.adapter_noise);
        if (mode == Mode::Scratch && !cfg.train_encoder) {
            model.encoder.trainable = false;
        }
        json effective = cfg;
        effective["data"] = a.data;
        effective["embed"] = model.dims().embed;
        effective["decay"] = model.encoder.decay;
        if (mode == Mode::Finetune) {
            effective["base"] = a.base;
            effective["adapter_noise"] = a.adapter_noise;
        }
        std::ofstream metrics;
        if (!a.metrics.empty()) {
            const std::string path = with_rank(a.metrics, cfg.rank, sweep);
            metrics.open(path);
            if (!metrics) {
                throw FormatError("cannot write " + path);
            }
            metrics << json{{"header", true}, {"config", effective}}.dump() << '\n';
        }
        const auto sink = [&](const StepMetrics& m) {
            if (metrics.is_open()) {
                metrics << to_json_line(m).dump() << '\n';
            }
        };
        auto [trained, history] = train(cfg, corpus, std::move(model), sink);
        const std::string ckpt = with_rank(a.out, cfg.rank, sweep);
        save_checkpoint(trained, ckpt);
        json row = eval_json(trained, corpus, cfg.context, a.eval_windows);
        row["rank"] = cfg.rank;
        row["checkpoint"] = ckpt;
        row["config"] = effective;
        if (spec) {
            row["true_joint_nll"] = true_joint_nll(*spec, cfg.horizon);
        }
        out << "rank " << cfg.rank << ": val joint NLL " << row["val_joint_nll"].get<double>() << ", first-token NLL "
            << row["val_first_token_nll"].get<double>() << ", max utilization "
            << row["max_utilization"].get<double>() << " -> " << ckpt << '\n';
        summary.push_back(std::move(row));
    }
    if (!a.summary.empty()) {
        write_json(a.summary, summary);
    }
    return kExitOk;
}

std::vector<Token> resolve_prompt(const SampleArgs& a, const std::optional<Vocab>& vocab)
{
    if (!a.text.empty()) {
        if (!vocab) {
            throw UsageError("--text needs --vocab");
        }
        return encode_text(*vocab, utf8_decode(a.text), UnknownPolicy::Error);
    }
    return {a.prompt.begin(), a.prompt.end()};
}

DecodeConfig decode_config(const std::string& mode, double temperature, const std::vector<int>& branching,
                           std::uint64_t seed)
{
    DecodeConfig c;
    c.temperature = temperature;
    c.seed = seed;
    c.branching = branching;
    if (mode == "greedy") {
        c.mode = DecodeMode::Greedy;
    } else if (mode == "stochastic") {
        c.mode = DecodeMode::Stochastic;
        if (!(temperature > 0.0)) {
            throw UsageError("stochastic mode needs --temperature > 0");
        }
    } else if (mode == "tree") {
        c.mode = DecodeMode::Tree;
        if (branching.empty()) {
            throw UsageError("tree mode needs --branching");
        }
    } else {
        throw UsageError("unknown --mode '" + mode + "'");
    }
    return c;
}

int cmd_sample(const SampleArgs& a, std::ostream& out)
{
    const Model model = load_checkpoint(a.checkpoint);
    std::optional<Vocab> vocab;
    if (!a.vocab.empty()) {
        vocab = read_json(a.vocab).get<Vocab>();
    }
    const std::vector<Token> prompt = resolve_prompt(a, vocab);
    if (prompt.empty()) {
        throw UsageError("a non-empty --prompt or --text is required");
    }
    for (Token t : prompt) {
        if (t < 0 || t >= model.dims().vocab) {
            throw UsageError("prompt token " + std::to_string(t) + " is outside the vocabulary");
        }
    }
    json result;
    std::vector<Token> tokens;
    if (a.mode == "base") {
        CounterRng rng(a.seed);
        tokens = a.temperature == 0.0 ? base_greedy_generate(model, prompt, a.max_tokens)
                                      : base_sample_generate(model, prompt, a.max_tokens, a.temperature, rng);
    } else {
        auto gen = generate(model, prompt, a.max_tokens, decode_config(a.mode, a.temperature, a.branching, a.seed));
        tokens = std::move(gen.tokens);
        result["stats"] = gen.stats;
    }
    result["tokens"] = tokens;
    result["mode"] = a.mode;
    result["seed"] = a.seed;
    result["temperature"] = a.temperature;
    if (vocab) {
        result["text"] = decode_text(*vocab, tokens);
        out << result["text"].get<std::string>() << '\n';
    } else {
        out << json(tokens).dump() << '\n';
    }
    if (!a.out.empty()) {
        write_json(a.out, result);
    }
    return kExitOk;
}

int cmd_bench(const BenchArgs& a, std::ostream& out)
{
    const Model model = load_checkpoint(a.checkpoint);
    const Corpus corpus = read_token_file(a.data, boundary_of(a.boundary), a.validation_fraction);
    if (corpus.vocab != model.dims().vocab) {
        throw ArgumentError("bench: corpus vocabulary does not match the checkpoint");
    }
    if (a.prompts < 1 || a.prompt_length < 1 || a.max_tokens < 0) {
        throw UsageError("--prompts and --prompt-length must be >= 1, --max-tokens >= 0");
    }
    const DecodeConfig cfg = decode_config(a.mode, a.temperature, a.branching, a.seed);

    std::vector<std::vector<Token>> prompts;
    const auto docs = corpus.validation_documents();
    std::vector<std::span<const Token>> usable;
    std::size_t starts = 0;
    for (const auto& d : docs) {
        if (d.size() >= static_cast<std::size_t>(a.prompt_length)) {
            usable.push_back(d);
            starts += d.size() - static_cast<std::size_t>(a.prompt_length) + 1;
        }
    }
    if (usable.empty()) {
        throw ArgumentError("bench: no validation document is as long as --prompt-length");
    }
    CounterRng rng(a.seed);
    for (int i = 0; i < a.prompts; ++i) {
        std::size_t k = rng.uniform_index(starts);
        for (const auto& d : usable) {
            const std::size_t here = d.size() - static_cast<std::size_t>(a.prompt_length) + 1;
            if (k < here) {
                prompts.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(k),
                                     d.begin() + static_cast<std::ptrdiff_t>(k) + a.prompt_length);
                break;
            }
            k -= here;
        }
    }

    SpecDecodeStats total;
    int mismatches = 0;
    double timed_tokens = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        DecodeConfig c = cfg;
        c.seed = CounterRng(a.seed).fork(i + 1).next_u64();
        const GenerateResult g = generate(model, prompts[i], a.max_tokens, c);
        total.steps += g.stats.steps;
        total.tokens_emitted += g.stats.tokens_emitted;
        total.base_evaluations += g.stats.base_evaluations;
        total.wall_ms_total += g.stats.wall_ms_total;
        total.accepted_per_step.insert(total.accepted_per_step.end(), g.stats.accepted_per_step.begin(),
                                       g.stats.accepted_per_step.end());
        if (g.stats.wall_ms_per_token > 0.0) {
            timed_tokens += g.stats.wall_ms_total / g.stats.wall_ms_per_token;
        }
        if (cfg.mode != DecodeMode::Stochastic && g.tokens != base_greedy_generate(model, prompts[i], a.max_tokens)) {
            ++mismatches;
        }
    }
    total.finalize();
    total.wall_ms_per_token = timed_tokens > 0.0 ? total.wall_ms_total / timed_tokens : 0.0;

    json report = total;
    report["mode"] = a.mode;
    report["rank"] = model.dims().rank;
    report["horizon"] = model.dims().horizon;
    report["prompts"] = a.prompts;
    report["prompt_length"] = a.prompt_length;
    report["max_tokens"] = a.max_tokens;
    report["seed"] = a.seed;
    if (cfg.mode == DecodeMode::Tree) {
        report["branching"] = a.branching;
    }
    if (cfg.mode == DecodeMode::Stochastic) {
        report["temperature"] = a.temperature;
    } else {
        report["lossless_mismatches"] = mismatches;
    }
    if (!a.out.empty()) {
        write_json(a.out, report);
    }
    out << a.mode << " r=" << model.dims().rank << ": average accepted " << total.average_accepted << " over "
        << total.steps << " steps, " << total.wall_ms_per_token << " ms/token\n";
    return mismatches == 0 ? kExitOk : kExitFailure;
}

int cmd_verify(const VerifyArgs& a, std::ostream& out)
{
    const auto checks = oracle::run_verify_suite(a.options);
    const json report = oracle::report_json(checks);
    for (const auto& c : checks) {
        out << (c.passed ? "PASS " : "FAIL ") << c.name << ' ' << c.detail.dump() << '\n';
    }
    if (!a.out.empty()) {
        write_json(a.out, report);
    }
    return report["passed"].get<bool>() ? kExitOk : kExitFailure;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"CP multi-token prediction heads: data, training, sampling and speculative decoding"};
    app.name("cpmtp");
    app.require_subcommand(1);

    std::string config_path;
    GenDataArgs gen;
    TrainArgs tr;
    TrainArgs ft;
    SampleArgs sa;
    BenchArgs be;
    VerifyArgs ve;

    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic Markov corpus or tokenize text");
    gen_cmd->add_option("--config", config_path, "JSON file of option defaults");
    gen_cmd->add_option("--source", gen.source, "markov or text");
    gen_cmd->add_option("--chain", gen.chain, "uniform, cycle, random, unigram or sparse");
    gen_cmd->add_option("--vocab", gen.vocab);
    gen_cmd->add_option("--order", gen.order);
    gen_cmd->add_option("--support", gen.support, "Non-zero entries per row (sparse chain)");
    gen_cmd->add_option("--floor", gen.floor, "Probability mass spread over the rest of each row (sparse chain)");
    gen_cmd->add_option("--length", gen.length);
    gen_cmd->add_option("--seed", gen.seed);
    gen_cmd->add_option("--input", gen.input, "UTF-8 text file");
    gen_cmd->add_option("--vocab-in", gen.vocab_in, "Vocabulary JSON to reuse instead of scanning the input");
    gen_cmd->add_option("--unknown", gen.unknown, "error or map")->check(CLI::IsMember({"error", "map"}));
    gen_cmd->add_option("--separator", gen.separator, "Document separator string");
    gen_cmd->add_option("--boundary", gen.boundary, "Boundary token id written between documents");
    gen_cmd->add_option("--out", gen.out, "Token file")->required();
    gen_cmd->add_option("--spec-out", gen.spec_out, "Chain JSON");
    gen_cmd->add_option("--vocab-out", gen.vocab_out, "Vocabulary JSON");

    auto* train_cmd = app.add_subcommand("train", "Train CP heads from scratch, optionally sweeping ranks");
    train_cmd->add_option("--config", config_path, "JSON file of option defaults");
    add_training_options(train_cmd, tr);
    train_cmd->add_option("--spec", tr.spec, "Chain JSON, for the exact joint NLL in the summary");
    train_cmd->add_option("--embed", tr.embed, "Embedding width E");
    train_cmd->add_option("--decay", tr.decay, "Encoder decay");
    train_cmd->add_option("--train-encoder", tr.train_encoder);

    auto* ft_cmd = app.add_subcommand("finetune", "Fit reduced heads on top of a frozen rank-1 model");
    ft_cmd->add_option("--config", config_path, "JSON file of option defaults");
    add_training_options(ft_cmd, ft);
    ft_cmd->add_option("--spec", ft.spec, "Chain JSON, for the exact joint NLL in the summary");
    ft_cmd->add_option("--base", ft.base, "Pretrained scratch checkpoint")->required();
    ft_cmd->add_option("--distill-beta", ft.distill_beta);
    ft_cmd->add_option("--discount", ft.discount);
    ft_cmd->add_option("--adapter-noise", ft.adapter_noise, "Adapter perturbation around identity");

    auto* sample_cmd = app.add_subcommand("sample", "Generate a continuation");
    sample_cmd->add_option("--config", config_path, "JSON file of option defaults");
    sample_cmd->add_option("--checkpoint", sa.checkpoint)->required();
    sample_cmd->add_option("--prompt", sa.prompt, "Comma-separated token ids")->delimiter(',');
    sample_cmd->add_option("--text", sa.text, "Prompt text (needs --vocab)");
    sample_cmd->add_option("--vocab", sa.vocab, "Vocabulary JSON");
    sample_cmd->add_option("--max-tokens", sa.max_tokens);
    sample_cmd->add_option("--mode", sa.mode, "base, greedy, stochastic or tree");
    sample_cmd->add_option("--temperature", sa.temperature);
    sample_cmd->add_option("--branching", sa.branching)->delimiter(',');
    sample_cmd->add_option("--seed", sa.seed);
    sample_cmd->add_option("--out", sa.out, "Result JSON");

    auto* bench_cmd = app.add_subcommand("bench", "Speculative decoding statistics over held-out prompts");
    bench_cmd->add_option("--config", config_path, "JSON file of option defaults");
    bench_cmd->add_option("--checkpoint", be.checkpoint)->required();
    bench_cmd->add_option("--data", be.data, "Token file supplying validation prompts")->required();
    bench_cmd->add_option("--boundary", be.boundary);
    bench_cmd->add_option("--validation-fraction", be.validation_fraction);
    bench_cmd->add_option("--prompts", be.prompts);
    bench_cmd->add_option("--prompt-length", be.prompt_length);
    bench_cmd->add_option("--max-tokens", be.max_tokens);
    bench_cmd->add_option("--mode", be.mode, "greedy, stochastic or tree");
    bench_cmd->add_option("--temperature", be.temperature);
    bench_cmd->add_option("--branching", be.branching)->delimiter(',');
    bench_cmd->add_option("--seed", be.seed);
    bench_cmd->add_option("--out", be.out, "Stats JSON");

    auto* verify_cmd = app.add_subcommand("verify", "Run the brute-force oracle suite");
    verify_cmd->add_option("--config", config_path, "JSON file of option defaults");
    verify_cmd->add_option("--seed", ve.options.seed);
    verify_cmd->add_option("--dist-instances", ve.options.dist_instances);
    verify_cmd->add_option("--grad-instances", ve.options.grad_instances);
    verify_cmd->add_option("--sampler-draws", ve.options.sampler_draws);
    verify_cmd->add_option("--lossless-prompts", ve.options.lossless_prompts);
    verify_cmd->add_option("--out", ve.out, "Report JSON");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
        CLI::App* sub = app.get_subcommands().front();
        if (!config_path.empty()) {
            std::vector<std::string> merged = args;
            const auto extra = config_arguments(*sub, config_path);
            merged.insert(merged.end(), extra.begin(), extra.end());
            app.clear();
            reversed.assign(merged.rbegin(), merged.rend());
            app.parse(reversed);
        }
        if (sub == gen_cmd) {
            return cmd_gen_data(gen, out);
        }
        if (sub == train_cmd) {
            return run_training(tr, Mode::Scratch, out);
        }
        if (sub == ft_cmd) {
            return run_training(ft, Mode::Finetune, out);
        }
        if (sub == sample_cmd) {
            return cmd_sample(sa, out);
        }
        if (sub == bench_cmd) {
            return cmd_bench(be, out);
        }
        return cmd_verify(ve, out);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        err << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
        return kExitFailure;
    }
}

} // namespace cpmtp
