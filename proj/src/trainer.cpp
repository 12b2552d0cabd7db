#include "loopmdm/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace loopmdm {

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
    if (total_steps < warmup_steps)
        throw ConfigError("train: total_steps=" + std::to_string(total_steps) +
                          " below warmup_steps=" + std::to_string(warmup_steps));
    if (!(learning_rate > real(0))) throw ConfigError("train: learning_rate must be > 0");
    if (weight_decay < real(0)) throw ConfigError("train: weight_decay must be >= 0");
    if (!(ema_decay >= real(0) && ema_decay < real(1)))
        throw ConfigError("train: ema_decay must lie in [0,1)");
}

// ---- loss ----

Tensor nelbo_loss(const ModelParams& p, const std::vector<TrainExample>& batch, Rng& rng,
                  int32_t* s_used, const std::vector<real>* forced_t, int32_t forced_s) {
    if (batch.empty()) throw ContractError("nelbo_loss: empty batch");
    const ModelConfig& cfg = p.cfg;
    std::size_t L = static_cast<std::size_t>(cfg.seq_len);
    std::size_t B = batch.size();
    if (forced_t != nullptr && forced_t->size() != B)
        throw ShapeError("nelbo_loss: " + std::to_string(forced_t->size()) + " forced timesteps for " +
                         std::to_string(B) + " sequences");
    NoiseSchedule sched;

    int32_t s = forced_s >= 1 ? forced_s : sample_loop_count(cfg.loop, rng);
    if (s_used != nullptr) *s_used = s;

    std::vector<real> t(B);
    for (std::size_t b = 0; b < B; ++b) t[b] = forced_t != nullptr ? (*forced_t)[b] : sample_time(rng);

    std::vector<TokenSeq> xt(B);
    std::vector<int32_t> targets(B * L);
    std::vector<uint8_t> supervised(B * L, 0);
    std::vector<real> weights(B * L, real(0));
    for (std::size_t b = 0; b < B; ++b) {
        const TrainExample& ex = batch[b];
        if (ex.x0.length() != L)
            throw ShapeError("nelbo_loss: sequence length " + std::to_string(ex.x0.length()) +
                             ", model expects " + std::to_string(L));
        if (ex.x0.has_mask()) throw ContractError("nelbo_loss: batch sequence contains mask ids");
        if (!ex.roles.empty() && ex.roles.size() != L)
            throw ShapeError("nelbo_loss: role vector length " + std::to_string(ex.roles.size()) +
                             " does not match sequence length " + std::to_string(L));
        real keep = sched.alpha(t[b]);
        real w = nelbo_weight(sched, t[b]) / (real(L) * real(B));
        xt[b] = ex.x0;
        for (std::size_t i = 0; i < L; ++i) {
            PositionRole role = ex.roles.empty() ? PositionRole::normal : ex.roles[i];
            targets[b * L + i] = ex.x0.tokens[i];
            switch (role) {
                case PositionRole::context: break;
                case PositionRole::pause: xt[b].tokens[i] = xt[b].vocab; break;
                case PositionRole::normal:
                    if (rng.uniform01() >= keep) {
                        xt[b].tokens[i] = xt[b].vocab;
                        supervised[b * L + i] = 1;
                        weights[b * L + i] = w;
                    }
                    break;
            }
        }
    }

    Rng* noise = cfg.loop.mask_noise_std > real(0) ? &rng : nullptr;
    ForwardRecord rec = forward_batch(p, xt, t, s, {}, noise);
    return cross_entropy(rec.logits, targets, supervised, weights);
}

// ---- compute accounting ----

namespace {

uint64_t loop_extra_flops(const LoopConfig& lc, uint64_t f_layer, real* expected_out) {
    switch (lc.loop_sampler) {
        case LoopSampler::uniform: {
            // E[S]-1 = (s_max-1)/2; f_layer is a multiple of 6, so this is exact.
            unsigned __int128 extra = static_cast<unsigned __int128>(lc.s_max - 1) *
                                      static_cast<uint64_t>(lc.n_m) * f_layer / 2;
            *expected_out = real(lc.s_max + 1) / real(2);
            return static_cast<uint64_t>(extra);
        }
        case LoopSampler::fixed: {
            *expected_out = real(lc.fixed_s);
            return static_cast<uint64_t>(lc.fixed_s - 1) * static_cast<uint64_t>(lc.n_m) * f_layer;
        }
        case LoopSampler::lognormal_poisson: {
            real e = real(1) + std::exp(lc.lognormal_mu + lc.lognormal_sigma * lc.lognormal_sigma / 2);
            e = std::min(e, real(4 * lc.s_max));
            *expected_out = e;
            return static_cast<uint64_t>(
                std::llround(double((e - real(1)) * real(lc.n_m)) * double(f_layer)));
        }
    }
    throw ContractError("per_step_flops: unknown loop sampler");
}

}  // namespace

FlopsReport per_step_flops(const ModelConfig& cfg, int32_t batch_size) {
    cfg.validate();
    if (batch_size < 1) throw ConfigError("per_step_flops: batch_size must be >= 1");
    uint64_t tokens = static_cast<uint64_t>(batch_size) * static_cast<uint64_t>(cfg.seq_len);
    FlopsReport rep;
    rep.tokens_per_step = tokens;
    rep.params_layer = layer_param_count(cfg);
    rep.params_total = total_param_count(cfg);
    rep.params_outside =
        rep.params_total - static_cast<uint64_t>(cfg.loop.n_layers_total) * rep.params_layer;
    rep.f_layer = 6 * rep.params_layer * tokens;
    rep.f_base = 6 * rep.params_total * tokens;
    rep.n_m = cfg.loop.n_m;
    rep.s_max = cfg.loop.s_max;
    rep.f_loop = rep.f_base + loop_extra_flops(cfg.loop, rep.f_layer, &rep.expected_loops);
    return rep;
}

int64_t matched_steps(const FlopsReport& rep, int64_t baseline_steps) {
    if (rep.f_loop == 0) throw ContractError("matched_steps: f_loop is zero");
    if (baseline_steps < 0) throw DomainError("matched_steps: negative baseline steps");
    unsigned __int128 num = static_cast<unsigned __int128>(baseline_steps) * rep.f_base;
    return static_cast<int64_t>(num / rep.f_loop);
}

uint64_t step_flops(const FlopsReport& rep, int32_t s) {
    if (s < 1) throw ConfigError("step_flops: s must be >= 1");
    return rep.f_base + static_cast<uint64_t>(s - 1) * static_cast<uint64_t>(rep.n_m) * rep.f_layer;
}

std::string FlopsReport::serialize() const {
    KvMap kv;
    kv.set_u64("f_layer", f_layer);
    kv.set_u64("f_base", f_base);
    kv.set_u64("f_loop", f_loop);
    kv.set_real("expected_loops", expected_loops);
    kv.set_i64("n_m", n_m);
    kv.set_i64("s_max", s_max);
    kv.set_u64("tokens_per_step", tokens_per_step);
    kv.set_u64("params_total", params_total);
    kv.set_u64("params_layer", params_layer);
    kv.set_u64("params_outside", params_outside);
    kv.set_i64("matched_steps", matched_steps);
    return kv.serialize();
}

FlopsReport FlopsReport::parse(const std::string& text) {
    KvMap kv = KvMap::parse(text);
    FlopsReport rep;
    rep.f_layer = kv.get_u64("f_layer");
    rep.f_base = kv.get_u64("f_base");
    rep.f_loop = kv.get_u64("f_loop");
    rep.expected_loops = kv.get_real("expected_loops");
    rep.n_m = static_cast<int32_t>(kv.get_i64("n_m"));
    rep.s_max = static_cast<int32_t>(kv.get_i64("s_max"));
    rep.tokens_per_step = kv.get_u64("tokens_per_step");
    rep.params_total = kv.get_u64("params_total");
    rep.params_layer = kv.get_u64("params_layer");
    rep.params_outside = kv.get_u64("params_outside");
    rep.matched_steps = kv.get_i64("matched_steps");
    return rep;
}

// ---- config serialization ----

namespace {

const char* sampler_name(LoopSampler s) {
    switch (s) {
        case LoopSampler::uniform: return "uniform";
        case LoopSampler::fixed: return "fixed";
        case LoopSampler::lognormal_poisson: return "lognormal_poisson";
    }
    throw ContractError("sampler_name: unknown sampler");
}

LoopSampler sampler_from_name(const std::string& s) {
    if (s == "uniform") return LoopSampler::uniform;
    if (s == "fixed") return LoopSampler::fixed;
    if (s == "lognormal_poisson") return LoopSampler::lognormal_poisson;
    throw ConfigError("unknown loop sampler '" + s + "'");
}

}  // namespace

void loop_config_to_kv(const LoopConfig& lc, KvMap& kv, const std::string& prefix) {
    kv.set_i64(prefix + "n_layers_total", lc.n_layers_total);
    kv.set_i64(prefix + "loop_start", lc.loop_start);
    kv.set_i64(prefix + "n_m", lc.n_m);
    kv.set_i64(prefix + "s_max", lc.s_max);
    kv.set(prefix + "sampler", sampler_name(lc.loop_sampler));
    kv.set_i64(prefix + "fixed_s", lc.fixed_s);
    kv.set_real(prefix + "lognormal_mu", lc.lognormal_mu);
    kv.set_real(prefix + "lognormal_sigma", lc.lognormal_sigma);
    kv.set_real(prefix + "mask_noise_std", lc.mask_noise_std);
}

LoopConfig loop_config_from_kv(const KvMap& kv, const std::string& prefix) {
    LoopConfig lc;
    lc.n_layers_total = static_cast<int32_t>(kv.get_i64(prefix + "n_layers_total"));
    lc.loop_start = static_cast<int32_t>(kv.get_i64(prefix + "loop_start"));
    lc.n_m = static_cast<int32_t>(kv.get_i64(prefix + "n_m"));
    lc.s_max = static_cast<int32_t>(kv.get_i64(prefix + "s_max"));
    lc.loop_sampler = sampler_from_name(kv.get(prefix + "sampler"));
    lc.fixed_s = static_cast<int32_t>(kv.get_i64(prefix + "fixed_s"));
    lc.lognormal_mu = kv.get_real(prefix + "lognormal_mu");
    lc.lognormal_sigma = kv.get_real(prefix + "lognormal_sigma");
    lc.mask_noise_std = kv.get_real(prefix + "mask_noise_std");
    return lc;
}

void model_config_to_kv(const ModelConfig& cfg, KvMap& kv) {
    kv.set_i64("model.vocab", cfg.vocab);
    kv.set_i64("model.seq_len", cfg.seq_len);
    kv.set_i64("model.d_model", cfg.d_model);
    kv.set_i64("model.n_heads", cfg.n_heads);
    loop_config_to_kv(cfg.loop, kv, "loop.");
}

ModelConfig model_config_from_kv(const KvMap& kv) {
    ModelConfig cfg;
    cfg.vocab = static_cast<int32_t>(kv.get_i64("model.vocab"));
    cfg.seq_len = static_cast<int32_t>(kv.get_i64("model.seq_len"));
    cfg.d_model = static_cast<int32_t>(kv.get_i64("model.d_model"));
    cfg.n_heads = static_cast<int32_t>(kv.get_i64("model.n_heads"));
    cfg.loop = loop_config_from_kv(kv, "loop.");
    cfg.validate();
    return cfg;
}

void train_config_to_kv(const TrainConfig& cfg, KvMap& kv) {
    kv.set_i64("train.batch_size", cfg.batch_size);
    kv.set_i64("train.total_steps", cfg.total_steps);
    kv.set_real("train.learning_rate", cfg.learning_rate);
    kv.set_i64("train.warmup_steps", cfg.warmup_steps);
    kv.set_real("train.weight_decay", cfg.weight_decay);
    kv.set_real("train.ema_decay", cfg.ema_decay);
    kv.set_real("train.grad_clip", cfg.grad_clip);
    kv.set_u64("train.seed", cfg.seed);
    kv.set_i64("train.flops_match", cfg.flops_match_baseline ? 1 : 0);
    if (cfg.flops_match_baseline)
        loop_config_to_kv(*cfg.flops_match_baseline, kv, "train.baseline.");
}

TrainConfig train_config_from_kv(const KvMap& kv) {
    TrainConfig cfg;
    cfg.batch_size = static_cast<int32_t>(kv.get_i64("train.batch_size"));
    cfg.total_steps = kv.get_i64("train.total_steps");
    cfg.learning_rate = kv.get_real("train.learning_rate");
    cfg.warmup_steps = kv.get_i64("train.warmup_steps");
    cfg.weight_decay = kv.get_real("train.weight_decay");
    cfg.ema_decay = kv.get_real("train.ema_decay");
    cfg.grad_clip = kv.get_real("train.grad_clip");
    cfg.seed = kv.get_u64("train.seed");
    if (kv.get_or("train.flops_match", "0") == "1")
        cfg.flops_match_baseline = loop_config_from_kv(kv, "train.baseline.");
    cfg.validate();
    return cfg;
}

// ---- trainer ----

Trainer::Trainer(ModelParams params, TrainConfig tcfg) : params_(std::move(params)), tcfg_(tcfg) {
    params_.cfg.validate();
    tcfg_.validate();
    rng_ = Rng(tcfg_.seed);
    flops_per_step_ = per_step_flops(params_.cfg, tcfg_.batch_size);
    init_opt_state();
}

void Trainer::init_opt_state() {
    named_ = named_params(params_);
    adam_m_.clear();
    adam_v_.clear();
    ema_.clear();
    for (auto& [name, t] : named_) {
        (void)name;
        adam_m_.emplace_back(t.size(), real(0));
        adam_v_.emplace_back(t.size(), real(0));
        ema_.push_back(t.values());
    }
}

real Trainer::lr_at(int64_t step) const {
    if (tcfg_.warmup_steps > 0 && step <= tcfg_.warmup_steps)
        return tcfg_.learning_rate * real(step) / real(tcfg_.warmup_steps);
    return tcfg_.learning_rate;
}

int64_t Trainer::planned_steps() const {
    if (!tcfg_.flops_match_baseline) return tcfg_.total_steps;
    ModelConfig base_cfg = params_.cfg;
    base_cfg.loop = *tcfg_.flops_match_baseline;
    FlopsReport base = per_step_flops(base_cfg, tcfg_.batch_size);
    unsigned __int128 num =
        static_cast<unsigned __int128>(tcfg_.total_steps) * base.f_loop;
    return static_cast<int64_t>(num / flops_per_step_.f_loop);
}

StepMetrics Trainer::train_step(const std::vector<TrainExample>& batch) {
    if (static_cast<int64_t>(batch.size()) != tcfg_.batch_size)
        throw ContractError("train_step: batch of " + std::to_string(batch.size()) +
                            ", config says " + std::to_string(tcfg_.batch_size));
    for (auto& [name, t] : named_) {
        (void)name;
        t.zero_grad();
    }
    int32_t s = 0;
    real loss_value;
    {
        Tape tape;
        Tensor loss = nelbo_loss(params_, batch, rng_, &s);
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw TrainingDiverged(step_ + 1, "non-finite loss " + std::to_string(loss_value) +
                                                  " at step " + std::to_string(step_ + 1));
        tape.backward(loss);
    }

    real sq = 0;
    for (std::size_t i = 0; i < named_.size(); ++i) {
        Tensor& t = named_[i].second;
        if (!t.has_grad()) continue;
        for (real g : t.grad()) sq += g * g;
    }
    real norm = std::sqrt(sq);
    if (!std::isfinite(norm))
        throw TrainingDiverged(step_ + 1,
                               "non-finite gradient norm at step " + std::to_string(step_ + 1));
    real clip_scale = real(1);
    if (tcfg_.grad_clip > real(0) && norm > tcfg_.grad_clip) clip_scale = tcfg_.grad_clip / norm;

    ++step_;
    real lr = lr_at(step_);
    const real b1 = real(0.9), b2 = real(0.999), eps = real(1e-8);
    real bc1 = real(1) - std::pow(b1, real(step_));
    real bc2 = real(1) - std::pow(b2, real(step_));
    for (std::size_t i = 0; i < named_.size(); ++i) {
        Tensor& t = named_[i].second;
        auto& values = t.values();
        auto& m = adam_m_[i];
        auto& v = adam_v_[i];
        auto& e = ema_[i];
        const bool has_g = t.has_grad();
        const real d = tcfg_.ema_decay;
        for (std::size_t j = 0; j < values.size(); ++j) {
            real g = has_g ? t.grad()[j] * clip_scale : real(0);
            m[j] = b1 * m[j] + (real(1) - b1) * g;
            v[j] = b2 * v[j] + (real(1) - b2) * g * g;
            real update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
            values[j] -= lr * (update + tcfg_.weight_decay * values[j]);
            e[j] = d * e[j] + (real(1) - d) * values[j];
        }
    }
    flops_ += step_flops(flops_per_step_, s);

    StepMetrics mtr;
    mtr.step = step_;
    mtr.loss = loss_value;
    mtr.lr = lr;
    mtr.s = s;
    mtr.grad_norm = norm;
    mtr.cumulative_flops = flops_;
    return mtr;
}

ModelParams Trainer::ema_params() const {
    Rng tmp(0);
    ModelParams out = init_params(params_.cfg, tmp);
    auto dst = named_params(out);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].second.values() = ema_[i];
    return out;
}

// ---- checkpoint container ----

namespace {

constexpr uint32_t kCheckpointVersion = 1;
constexpr uint8_t kDtypeF64 = 0;
constexpr uint8_t kDtypeF32 = 1;
constexpr uint8_t kDtypeBytes = 3;

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_section(std::string& out, const std::string& name, uint8_t dtype, const void* data,
                 std::size_t bytes, std::size_t count) {
    if (name.size() > 0xffff) throw ContractError("checkpoint section name too long");
    out.push_back(static_cast<char>(name.size() & 0xff));
    out.push_back(static_cast<char>((name.size() >> 8) & 0xff));
    out.append(name);
    out.push_back(static_cast<char>(dtype));
    put_u64(out, count);
    out.append(static_cast<const char*>(data), bytes);
}

void put_real_section(std::string& out, const std::string& name, const std::vector<real>& v) {
    put_section(out, name, sizeof(real) == 8 ? kDtypeF64 : kDtypeF32, v.data(),
                v.size() * sizeof(real), v.size());
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    std::string context = "header";

    void need(std::size_t n) {
        if (pos + n > buf.size())
            throw IoError("checkpoint truncated in " + context + " (need " + std::to_string(n) +
                          " bytes at offset " + std::to_string(pos) + ")");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string v = buf.substr(pos, n);
        pos += n;
        return v;
    }
};

struct Section {
    uint8_t dtype;
    std::string payload;
    uint64_t count;
};

struct Container {
    KvMap config;
    std::vector<std::pair<std::string, Section>> sections;

    const Section& get(const std::string& name) const {
        for (auto& [n, s] : sections)
            if (n == name) return s;
        throw IoError("checkpoint missing section '" + name + "'");
    }
    std::vector<real> reals(const std::string& name, std::size_t expect) const {
        const Section& s = get(name);
        uint8_t want = sizeof(real) == 8 ? kDtypeF64 : kDtypeF32;
        if (s.dtype != want)
            throw IoError("checkpoint section '" + name + "' has dtype " + std::to_string(s.dtype) +
                          ", build expects " + std::to_string(want));
        if (s.count != expect)
            throw IoError("checkpoint section '" + name + "' holds " + std::to_string(s.count) +
                          " values, expected " + std::to_string(expect));
        std::vector<real> out(expect);
        std::memcpy(out.data(), s.payload.data(), expect * sizeof(real));
        return out;
    }
};

std::string container_serialize(const KvMap& config,
                                const std::vector<std::pair<std::string, Section>>& sections) {
    std::string out = "LMDM";
    put_u32(out, kCheckpointVersion);
    std::string cfg_text = config.serialize();
    put_u64(out, cfg_text.size());
    out += cfg_text;
    for (const auto& [name, sec] : sections)
        put_section(out, name, sec.dtype, sec.payload.data(), sec.payload.size(), sec.count);
    out.push_back(0);
    out.push_back(0);  // zero-length name ends the section list
    put_u64(out, fnv1a(out));
    return out;
}

Container container_parse(const std::string& bytes) {
    ByteReader rd{bytes};
    std::string magic = rd.bytes(4);
    if (magic != "LMDM") throw IoError("not a checkpoint file (bad magic)");
    uint32_t version = rd.u32();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(version) + ", this build reads " +
                      std::to_string(kCheckpointVersion));
    rd.context = "config block";
    uint64_t cfg_len = rd.u64();
    Container c;
    c.config = KvMap::parse(rd.bytes(cfg_len));
    for (;;) {
        rd.context = "section table";
        rd.need(2);
        uint16_t name_len = static_cast<uint16_t>(rd.u8());
        name_len |= static_cast<uint16_t>(rd.u8()) << 8;
        if (name_len == 0) break;
        std::string name = rd.bytes(name_len);
        rd.context = "section '" + name + "'";
        Section sec;
        sec.dtype = rd.u8();
        sec.count = rd.u64();
        std::size_t elem = sec.dtype == kDtypeF64 ? 8 : sec.dtype == kDtypeF32 ? 4 : 1;
        sec.payload = rd.bytes(sec.count * elem);
        c.sections.emplace_back(std::move(name), std::move(sec));
    }
    rd.context = "checksum";
    std::size_t body_end = rd.pos;
    uint64_t stored = rd.u64();
    if (rd.pos != bytes.size())
        throw IoError("checkpoint has " + std::to_string(bytes.size() - rd.pos) +
                      " trailing bytes after checksum");
    uint64_t computed = fnv1a(bytes.substr(0, body_end));
    if (stored != computed) throw IoError("checkpoint checksum mismatch");
    return c;
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

Section real_section(const std::vector<real>& v) {
    Section s;
    s.dtype = sizeof(real) == 8 ? kDtypeF64 : kDtypeF32;
    s.count = v.size();
    s.payload.assign(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(real));
    return s;
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
    KvMap cfg;
    cfg.set("kind", "trainer");
    model_config_to_kv(params_.cfg, cfg);
    train_config_to_kv(tcfg_, cfg);
    cfg.set_i64("state.step", step_);
    cfg.set_u64("state.flops", flops_);

    std::vector<std::pair<std::string, Section>> sections;
    for (std::size_t i = 0; i < named_.size(); ++i) {
        const auto& [name, t] = named_[i];
        sections.emplace_back("param." + name, real_section(t.values()));
        sections.emplace_back("ema." + name, real_section(ema_[i]));
        sections.emplace_back("adam_m." + name, real_section(adam_m_[i]));
        sections.emplace_back("adam_v." + name, real_section(adam_v_[i]));
    }
    std::ostringstream rng_bytes;
    rng_.save(rng_bytes);
    Section rs;
    rs.dtype = kDtypeBytes;
    rs.payload = std::move(rng_bytes).str();
    rs.count = rs.payload.size();
    sections.emplace_back("rng", std::move(rs));

    write_file_bytes(path, container_serialize(cfg, sections));
}

Trainer Trainer::load_checkpoint(const std::string& path) {
    Container c = container_parse(read_file_bytes(path));
    if (c.config.get_or("kind", "") != "trainer")
        throw IoError("checkpoint at '" + path + "' is not a trainer checkpoint");
    ModelConfig mcfg = model_config_from_kv(c.config);
    TrainConfig tcfg = train_config_from_kv(c.config);

    Trainer tr;
    Rng tmp(0);
    tr.params_ = init_params(mcfg, tmp);
    tr.tcfg_ = tcfg;
    tr.flops_per_step_ = per_step_flops(mcfg, tcfg.batch_size);
    tr.init_opt_state();
    tr.step_ = c.config.get_i64("state.step");
    tr.flops_ = c.config.get_u64("state.flops");
    for (std::size_t i = 0; i < tr.named_.size(); ++i) {
        const std::string& name = tr.named_[i].first;
        std::size_t n = tr.named_[i].second.size();
        tr.named_[i].second.values() = c.reals("param." + name, n);
        tr.ema_[i] = c.reals("ema." + name, n);
        tr.adam_m_[i] = c.reals("adam_m." + name, n);
        tr.adam_v_[i] = c.reals("adam_v." + name, n);
    }
    const Section& rs = c.get("rng");
    if (rs.dtype != kDtypeBytes || rs.payload.size() != Rng::serialized_size())
        throw IoError("checkpoint section 'rng' is malformed");
    std::istringstream rng_bytes(rs.payload);
    if (!tr.rng_.load(rng_bytes)) throw IoError("checkpoint section 'rng' is malformed");
    return tr;
}

void save_model(const ModelParams& p, const std::string& path) {
    KvMap cfg;
    cfg.set("kind", "model");
    model_config_to_kv(p.cfg, cfg);
    std::vector<std::pair<std::string, Section>> sections;
    ModelParams handle = p;  // tensors are shared, copying the struct is cheap
    for (auto& [name, t] : named_params(handle))
        sections.emplace_back("param." + name, real_section(t.values()));
    write_file_bytes(path, container_serialize(cfg, sections));
}

ModelParams load_model(const std::string& path) {
    Container c = container_parse(read_file_bytes(path));
    std::string kind = c.config.get_or("kind", "");
    if (kind != "model" && kind != "trainer")
        throw IoError("'" + path + "' is not a model checkpoint");
    ModelConfig mcfg = model_config_from_kv(c.config);
    Rng tmp(0);
    ModelParams p = init_params(mcfg, tmp);
    for (auto& [name, t] : named_params(p)) t.values() = c.reals("param." + name, t.size());
    return p;
}

}  // namespace loopmdm
