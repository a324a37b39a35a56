// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/model.hpp>

#include <cpmtp/binary_io.hpp>
#include <cpmtp/errors.hpp>

#include <fstream>
#include <map>
#include <memory>
#include <utility>

namespace cpmtp {

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'P', 'M', 'T', 'P', 'C', 'K', 'P'};

std::string indexed(const char* prefix, int s, int a)
{
    return std::string(prefix) + "." + std::to_string(s) + "." + std::to_string(a);
}

} // namespace

std::string_view to_string(Mode mode)
{
    return mode == Mode::Scratch ? "scratch" : "finetune";
}

Mode parse_mode(std::string_view text)
{
    if (text == "scratch") {
        return Mode::Scratch;
    }
    if (text == "finetune") {
        return Mode::Finetune;
    }
    throw ArgumentError("unknown mode '" + std::string(text) + "' (expected scratch or finetune)");
}

const HeadDims& Model::dims() const
{
    return std::visit([](const auto& h) -> const HeadDims& { return h.dims; }, head);
}

void Model::check() const
{
    encoder.check();
    std::visit([](const auto& h) { h.check(); }, head);
    const bool reduced = std::holds_alternative<ReducedHeadParamsd>(head);
    if (reduced != (mode == Mode::Finetune)) {
        throw StructuralError("model mode does not match head type");
    }
    if (encoder.vocab() != dims().vocab || encoder.embed() != dims().embed) {
        throw StructuralError("encoder and head dimensions disagree");
    }
}

Model make_scratch_model(const ModelShape& shape, std::uint64_t seed)
{
    validate(shape.dims);
    CounterRng rng(seed);
    CounterRng enc_rng = rng.fork(1);
    CounterRng head_rng = rng.fork(2);
    Model m;
    m.mode = Mode::Scratch;
    m.encoder = EncoderParams::random(shape.dims.vocab, shape.dims.embed, shape.decay, enc_rng, shape.encoder_scale);
    m.head = FullHeadParamsd::random(shape.dims, head_rng);
    return m;
}

Model make_finetune_model(const Model& pretrained, int horizon, int rank, std::uint64_t seed, double adapter_noise)
{
    if (pretrained.mode != Mode::Scratch || pretrained.dims().rank != 1) {
        throw ArgumentError("finetune: pretrained model must be a rank-1 scratch model");
    }
    HeadDims d = pretrained.dims();
    d.horizon = horizon;
    d.rank = rank;
    validate(d);
    auto shared = std::make_shared<const MatrixXd>(pretrained.full_head().factor(0, 0));
    CounterRng rng = CounterRng(seed).fork(3);
    Model m;
    m.mode = Mode::Finetune;
    m.encoder = pretrained.encoder;
    m.encoder.trainable = false;
    m.head = ReducedHeadParamsd::warm_start(d, std::move(shared), rng, adapter_noise);
    return m;
}

HeadLogits<double> head_logits(const Model& model, const Embedding& e)
{
    return std::visit([&](const auto& h) { return cpmtp::head_logits(h, e); }, model.head);
}

CPJointDistd draft_dist(const Model& model, const Embedding& e)
{
    return to_distribution(head_logits(model, e));
}

LogDistributiond base_next_token_dist(const Model& model, const Embedding& e)
{
    if (model.mode == Mode::Finetune) {
        const auto& w = *model.reduced_head().shared_head;
        detail::check_embedding(e, model.dims().embed);
        return {log_softmax(w * e)};
    }
    return first_token_marginal(draft_dist(model, e));
}

std::vector<ParamRef> parameters(Model& model)
{
    std::vector<ParamRef> out;
    out.push_back({"encoder.token_table", &model.encoder.token_table, model.encoder.trainable});
    if (auto* full = std::get_if<FullHeadParamsd>(&model.head)) {
        for (int s = 0; s < full->dims.horizon; ++s) {
            for (int a = 0; a < full->dims.rank; ++a) {
                out.push_back({indexed("head.factor", s, a), &full->factor(s, a), true});
            }
        }
        out.push_back({"head.gate", &full->gate_weights, true});
    } else {
        auto& red = std::get<ReducedHeadParamsd>(model.head);
        // The shared head is immutable; it is exposed read-only via the const overload.
        for (int s = 0; s < red.dims.horizon; ++s) {
            for (int a = 0; a < red.dims.rank; ++a) {
                out.push_back({indexed("head.adapter", s, a), &red.adapter(s, a), true});
            }
        }
        out.push_back({"head.gate", &red.gate_weights, true});
    }
    return out;
}

std::vector<ConstParamRef> parameters(const Model& model)
{
    std::vector<ConstParamRef> out;
    out.push_back({"encoder.token_table", &model.encoder.token_table, model.encoder.trainable});
    if (const auto* full = std::get_if<FullHeadParamsd>(&model.head)) {
        for (int s = 0; s < full->dims.horizon; ++s) {
            for (int a = 0; a < full->dims.rank; ++a) {
                out.push_back({indexed("head.factor", s, a), &full->factor(s, a), true});
            }
        }
        out.push_back({"head.gate", &full->gate_weights, true});
    } else {
        const auto& red = std::get<ReducedHeadParamsd>(model.head);
        out.push_back({"head.shared", red.shared_head.get(), false});
        for (int s = 0; s < red.dims.horizon; ++s) {
            for (int a = 0; a < red.dims.rank; ++a) {
                out.push_back({indexed("head.adapter", s, a), &red.adapter(s, a), true});
            }
        }
        out.push_back({"head.gate", &red.gate_weights, true});
    }
    return out;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path)
{
    model.check();
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot open checkpoint for writing: " + path.string());
    }
    const auto& d = model.dims();
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_u32(out, kCheckpointVersion);
    io::write_u32(out, static_cast<std::uint32_t>(model.mode));
    io::write_u32(out, static_cast<std::uint32_t>(d.horizon));
    io::write_u32(out, static_cast<std::uint32_t>(d.rank));
    io::write_u32(out, static_cast<std::uint32_t>(d.vocab));
    io::write_u32(out, static_cast<std::uint32_t>(d.embed));
    io::write_f64(out, model.encoder.decay);
    io::write_u32(out, model.encoder.trainable ? 1U : 0U);
    const auto params = parameters(model);
    io::write_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        io::write_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        io::write_u32(out, static_cast<std::uint32_t>(p.value->rows()));
        io::write_u32(out, static_cast<std::uint32_t>(p.value->cols()));
        for (Eigen::Index i = 0; i < p.value->size(); ++i) {
            io::write_f64(out, p.value->data()[i]);
        }
    }
    if (!out) {
        throw FormatError("failed writing checkpoint: " + path.string());
    }
}

Model load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open checkpoint: " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic))) {
        throw FormatError("not a checkpoint file: " + path.string());
    }
    const std::uint32_t version = io::read_u32(in);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t mode = io::read_u32(in);
    if (mode > 1) {
        throw FormatError("bad checkpoint mode " + std::to_string(mode));
    }
    HeadDims d;
    d.horizon = static_cast<int>(io::read_u32(in));
    d.rank = static_cast<int>(io::read_u32(in));
    d.vocab = static_cast<int>(io::read_u32(in));
    d.embed = static_cast<int>(io::read_u32(in));
    validate(d);

    Model m;
    m.mode = static_cast<Mode>(mode);
    m.encoder.decay = io::read_f64(in);
    m.encoder.trainable = io::read_u32(in) != 0;
    m.encoder.token_table = MatrixXd::Zero(d.vocab, d.embed);
    if (m.mode == Mode::Scratch) {
        m.head = FullHeadParamsd::zeros(d);
    } else {
        ReducedHeadParamsd red;
        red.dims = d;
        red.adapters.assign(static_cast<std::size_t>(d.horizon * d.rank), MatrixXd::Zero(d.embed, d.embed));
        red.gate_weights = MatrixXd::Zero(d.rank, d.embed);
        m.head = std::move(red);
    }

    // Expected layout, in order; the shared head is read into a fresh buffer.
    MatrixXd shared = MatrixXd::Zero(d.vocab, d.embed);
    std::map<std::string, MatrixXd*> by_name;
    for (const auto& p : parameters(m)) {
        by_name[p.name] = p.value;
    }
    by_name["head.shared"] = &shared;
    std::vector<std::pair<std::string, MatrixXd*>> slots;
    for (const auto& p : parameters(std::as_const(m))) {
        slots.emplace_back(p.name, by_name.at(p.name));
    }
    const std::uint32_t count = io::read_u32(in);
    if (count != slots.size()) {
        throw FormatError("checkpoint array count " + std::to_string(count) + " != expected " +
                          std::to_string(slots.size()));
    }
    for (auto& [name, target] : slots) {
        const std::uint32_t len = io::read_u32(in);
        if (len > 4096) {
            throw FormatError("checkpoint array name too long");
        }
        std::string got(len, '\0');
        in.read(got.data(), len);
        if (got != name) {
            throw FormatError("checkpoint array '" + got + "' where '" + name + "' was expected");
        }
        const std::uint32_t rows = io::read_u32(in);
        const std::uint32_t cols = io::read_u32(in);
        if (rows != target->rows() || cols != target->cols()) {
            throw FormatError("checkpoint array '" + name + "' has wrong shape");
        }
        for (Eigen::Index i = 0; i < target->size(); ++i) {
            target->data()[i] = io::read_f64(in);
        }
    }
    if (m.mode == Mode::Finetune) {
        m.reduced_head().shared_head = std::make_shared<const MatrixXd>(std::move(shared));
    }
    m.check();
    return m;
}

} // namespace cpmtp
