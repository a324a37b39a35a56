// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/oracles.hpp>

#include <cpmtp/encoder.hpp>
#include <cpmtp/errors.hpp>
#include <cpmtp/heads.hpp>
#include <cpmtp/sampler.hpp>
#include <cpmtp/speculative.hpp>

#include <algorithm>
#include <cmath>

namespace cpmtp::oracle {

namespace {

std::size_t ipow(int base, int exp)
{
    std::size_t out = 1;
    for (int i = 0; i < exp; ++i) {
        out *= static_cast<std::size_t>(base);
    }
    return out;
}

std::vector<Token> unflatten(std::size_t flat, int horizon, int vocab)
{
    std::vector<Token> out(static_cast<std::size_t>(horizon));
    for (int s = horizon; s-- > 0;) {
        out[static_cast<std::size_t>(s)] = static_cast<Token>(flat % static_cast<std::size_t>(vocab));
        flat /= static_cast<std::size_t>(vocab);
    }
    return out;
}

int draw_int(CounterRng& rng, int lo, int hi)
{
    return lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
}

/// Random token windows that own their storage.
struct RandomBatch {
    std::vector<std::vector<Token>> contexts;
    std::vector<std::vector<Token>> targets;
    std::vector<Window> windows;

    RandomBatch(int count, int vocab, int horizon, CounterRng& rng)
    {
        for (int i = 0; i < count; ++i) {
            std::vector<Token> c(static_cast<std::size_t>(draw_int(rng, 1, 6)));
            for (auto& t : c) {
                t = draw_int(rng, 0, vocab - 1);
            }
            std::vector<Token> x(static_cast<std::size_t>(horizon));
            for (auto& t : x) {
                t = draw_int(rng, 0, vocab - 1);
            }
            contexts.push_back(std::move(c));
            targets.push_back(std::move(x));
        }
        for (std::size_t i = 0; i < contexts.size(); ++i) {
            windows.push_back({contexts[i], targets[i]});
        }
    }
};

Check check_materialize(const VerifyOptions& o, CounterRng& rng)
{
    double worst = 0.0;
    double worst_sum = 0.0;
    for (int i = 0; i < o.dist_instances; ++i) {
        const int v = draw_int(rng, 2, 7);
        const int n = draw_int(rng, 1, 3);
        const int r = draw_int(rng, 1, 5);
        const auto dist = random_dist(n, v, r, rng);
        const auto tensor = materialize(dist);
        const auto dense = dense_joint(dist);
        worst_sum = std::max(worst_sum, std::abs(tensor.values.sum() - 1.0));
        for (std::size_t f = 0; f < dense.size(); ++f) {
            const auto x = unflatten(f, n, v);
            const double lp = std::exp(log_prob(dist, x));
            worst = std::max({worst, std::abs(lp - tensor.values(static_cast<Eigen::Index>(f))),
                              std::abs(lp - dense[f])});
        }
    }
    return {"materialize_equivalence", worst <= 1e-9 && worst_sum <= 1e-9,
            {{"max_abs_error", worst}, {"max_sum_error", worst_sum}, {"instances", o.dist_instances}}};
}

Check check_conditioning(const VerifyOptions& o, CounterRng& rng)
{
    double worst = 0.0;
    for (int i = 0; i < o.dist_instances; ++i) {
        const int n = 3;
        const int v = 5;
        const auto dist = random_dist(n, v, 3, rng);
        const auto dense = dense_joint(dist);
        const int observed = draw_int(rng, 1, n - 1);
        std::vector<Token> prefix;
        CPJointDistd cond = dist;
        for (int s = 0; s < observed; ++s) {
            prefix.push_back(draw_int(rng, 0, v - 1));
            cond = condition_on(cond, s, prefix.back());
        }
        for (int pos = observed; pos < n; ++pos) {
            const VectorXd expect = dense_conditional(dense, n, v, prefix, pos);
            const VectorXd got = marginal(cond, pos).probs();
            worst = std::max(worst, (expect - got).cwiseAbs().maxCoeff());
        }
    }
    return {"conditioning", worst <= 1e-9, {{"max_abs_error", worst}}};
}

Check check_gradients(const VerifyOptions& o, CounterRng& rng)
{
    const HeadDims d{2, 3, 6, 8};
    double worst_joint = 0.0;
    double worst_aux = 0.0;
    double worst_distill = 0.0;
    double worst_encoder = 0.0;
    for (int i = 0; i < o.grad_instances; ++i) {
        const std::uint64_t seed = rng.next_u64();
        Model scratch = make_scratch_model({d, 0.7, 1.0}, seed);
        RandomBatch batch(4, d.vocab, d.horizon, rng);
        TrainConfig cfg;
        cfg.rank = d.rank;
        cfg.horizon = d.horizon;
        cfg.aux_coefficient = 0.0;
        worst_joint = std::max(worst_joint, model_gradient_error(scratch, cfg, batch.windows));
        cfg.aux_coefficient = 1.0;
        worst_aux = std::max(worst_aux, model_gradient_error(scratch, cfg, batch.windows));

        Model base = make_scratch_model({{1, 1, d.vocab, d.embed}, 0.7, 1.0}, seed ^ 0x5bd1e995ULL);
        Model ft = make_finetune_model(base, d.horizon, d.rank, seed, 0.3);
        TrainConfig fcfg = cfg;
        fcfg.mode = Mode::Finetune;
        fcfg.aux_coefficient = 0.5;
        worst_distill = std::max(worst_distill, model_gradient_error(ft, fcfg, batch.windows));

        // Encoder: L = sum_t <g_t, e_t>.
        std::vector<VectorXd> upstream;
        const auto& ctx = batch.contexts.front();
        for (std::size_t t = 0; t < ctx.size(); ++t) {
            VectorXd g(d.embed);
            for (auto& x : g) {
                x = rng.uniform(-1.0, 1.0);
            }
            upstream.push_back(g);
        }
        EncoderParams enc = scratch.encoder;
        const MatrixXd analytic = encode_grad(enc, ctx, upstream);
        auto f = [&] {
            const auto es = encode(enc, ctx);
            double s = 0.0;
            for (std::size_t t = 0; t < es.size(); ++t) {
                s += upstream[t].dot(es[t]);
            }
            return s;
        };
        const MatrixXd numeric = finite_difference(f, enc.token_table);
        worst_encoder = std::max(worst_encoder, relative_error({analytic}, {numeric}));
    }
    const double tol = 1e-5;
    return {"gradients",
            worst_joint <= tol && worst_aux <= tol && worst_distill <= tol && worst_encoder <= tol,
            {{"joint_nll", worst_joint},
             {"aux_surrogate", worst_aux},
             {"distill", worst_distill},
             {"encoder", worst_encoder},
             {"tolerance", tol}}};
}

Check check_sampler(const VerifyOptions& o, CounterRng& rng)
{
    const auto dist = random_dist(2, 4, 3, rng);
    const auto dense = dense_joint(dist);
    VectorXd counts = VectorXd::Zero(static_cast<Eigen::Index>(dense.size()));
    CounterRng draws = rng.fork(77);
    for (int i = 0; i < o.sampler_draws; ++i) {
        const auto x = sample_sequence(dist, 1.0, draws);
        counts(x[0] * 4 + x[1]) += 1.0;
    }
    const VectorXd expect = Eigen::Map<const VectorXd>(dense.data(), static_cast<Eigen::Index>(dense.size()));
    const double tv = total_variation(counts / o.sampler_draws, expect);
    return {"sampler_tv", tv <= 0.01, {{"tv", tv}, {"draws", o.sampler_draws}, {"threshold", 0.01}}};
}

Check check_lossless(const VerifyOptions& o, CounterRng& rng)
{
    const HeadDims d{3, 3, 8, 16};
    const Model model = make_scratch_model({d, 0.7, 1.5}, rng.next_u64());
    int mismatches = 0;
    for (int i = 0; i < o.lossless_prompts; ++i) {
        std::vector<Token> prompt(static_cast<std::size_t>(draw_int(rng, 1, 8)));
        for (auto& t : prompt) {
            t = draw_int(rng, 0, d.vocab - 1);
        }
        const auto expect = base_greedy_generate(model, prompt, 40);
        for (const auto& cfg : {DecodeConfig{DecodeMode::Greedy, 1.0, 0, {}},
                                DecodeConfig{DecodeMode::Tree, 1.0, 0, {3, 2}}}) {
            if (generate(model, prompt, 40, cfg).tokens != expect) {
                ++mismatches;
            }
        }
    }
    return {"greedy_lossless", mismatches == 0, {{"mismatches", mismatches}, {"prompts", o.lossless_prompts}}};
}

Check check_reduced(const VerifyOptions& o, CounterRng& rng)
{
    const HeadDims d{2, 3, 6, 8};
    double worst = 0.0;
    for (int i = 0; i < o.grad_instances; ++i) {
        auto shared = std::make_shared<const MatrixXd>(uniform_matrix<double>(d.vocab, d.embed, 1.0, rng));
        const auto red = ReducedHeadParamsd::random(d, shared, rng);
        const auto full = compose(red);
        VectorXd e(d.embed);
        for (auto& x : e) {
            x = rng.uniform(-1.0, 1.0);
        }
        const auto a = head_logits(red, e);
        const auto b = head_logits(full, e);
        for (int s = 0; s < d.horizon; ++s) {
            worst = std::max(worst, (a.factors[static_cast<std::size_t>(s)] - b.factors[static_cast<std::size_t>(s)])
                                        .cwiseAbs()
                                        .maxCoeff());
        }
    }
    return {"reduced_head_equivalence", worst <= 1e-10, {{"max_abs_error", worst}}};
}

} // namespace

CPJointDistd random_dist(int horizon, int vocab, int rank, CounterRng& rng, double scale)
{
    VectorXd gate(rank);
    for (auto& x : gate) {
        x = rng.uniform(-scale, scale);
    }
    std::vector<MatrixXd> factors;
    for (int s = 0; s < horizon; ++s) {
        factors.push_back(uniform_matrix<double>(vocab, rank, scale, rng));
    }
    return from_logits(gate, factors);
}

std::vector<double> dense_joint(const CPJointDistd& dist)
{
    const int n = dist.horizon();
    const int v = dist.vocab();
    const int r = dist.rank();
    std::vector<double> out(ipow(v, n), 0.0);
    for (std::size_t f = 0; f < out.size(); ++f) {
        const auto x = unflatten(f, n, v);
        double total = 0.0;
        for (int a = 0; a < r; ++a) {
            double p = std::exp(dist.log_weights()(a));
            for (int s = 0; s < n; ++s) {
                p *= std::exp(dist.log_factor(s)(x[static_cast<std::size_t>(s)], a));
            }
            total += p;
        }
        out[f] = total;
    }
    return out;
}

VectorXd dense_conditional(const std::vector<double>& joint, int horizon, int vocab, std::span<const Token> prefix,
                           int position)
{
    VectorXd out = VectorXd::Zero(vocab);
    for (std::size_t f = 0; f < joint.size(); ++f) {
        const auto x = unflatten(f, horizon, vocab);
        bool match = true;
        for (std::size_t j = 0; j < prefix.size(); ++j) {
            match = match && x[j] == prefix[j];
        }
        if (match) {
            out(x[static_cast<std::size_t>(position)]) += joint[f];
        }
    }
    return out / out.sum();
}

double naive_kl(const VectorXd& p, const VectorXd& q)
{
    double kl = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p(i) > 0.0) {
            kl += p(i) * std::log(p(i) / q(i));
        }
    }
    return kl;
}

double total_variation(const VectorXd& p, const VectorXd& q)
{
    return 0.5 * (p - q).cwiseAbs().sum();
}

MatrixXd finite_difference(const std::function<double()>& f, MatrixXd& x, double h)
{
    MatrixXd g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        const double up = f();
        x.data()[i] = orig - h;
        const double down = f();
        x.data()[i] = orig;
        g.data()[i] = (up - down) / (2.0 * h);
    }
    return g;
}

double relative_error(const std::vector<MatrixXd>& a, const std::vector<MatrixXd>& b)
{
    double diff = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]).squaredNorm();
        na += a[i].squaredNorm();
        nb += b[i].squaredNorm();
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
    return std::sqrt(diff) / denom;
}

double model_gradient_error(Model model, const TrainConfig& config, std::span<const Window> batch, double h)
{
    const auto analytic = batch_loss_and_grad(model, config, batch).arrays;
    auto params = parameters(model);
    std::vector<MatrixXd> a;
    std::vector<MatrixXd> numeric;
    const bool encoder_trained = model.mode == Mode::Scratch && config.train_encoder && model.encoder.trainable;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable || (i == 0 && !encoder_trained)) {
            continue;
        }
        auto f = [&] { return batch_loss_and_grad(model, config, batch).loss; };
        numeric.push_back(finite_difference(f, *params[i].value, h));
        a.push_back(analytic[i]);
    }
    return relative_error(a, numeric);
}

std::vector<Check> run_verify_suite(const VerifyOptions& options)
{
    CounterRng root(options.seed);
    std::vector<Check> out;
    CounterRng r1 = root.fork(1);
    out.push_back(check_materialize(options, r1));
    CounterRng r2 = root.fork(2);
    out.push_back(check_conditioning(options, r2));
    CounterRng r3 = root.fork(3);
    out.push_back(check_gradients(options, r3));
    CounterRng r4 = root.fork(4);
    out.push_back(check_sampler(options, r4));
    CounterRng r5 = root.fork(5);
    out.push_back(check_lossless(options, r5));
    CounterRng r6 = root.fork(6);
    out.push_back(check_reduced(options, r6));
    return out;
}

nlohmann::json report_json(const std::vector<Check>& checks)
{
    nlohmann::json arr = nlohmann::json::array();
    bool all = true;
    for (const auto& c : checks) {
        arr.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
        all = all && c.passed;
    }
    return {{"passed", all}, {"checks", arr}};
}

} // namespace cpmtp::oracle
