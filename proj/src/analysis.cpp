#include "loopmdm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "loopmdm/diffusion.hpp"
#include "loopmdm/rng.hpp"

namespace loopmdm {

namespace {

constexpr std::size_t kForwardChunk = 16;  // sequences per forward when retaining maps

void check_eval_set(const ModelParams& p, const std::vector<TokenSeq>& eval_set, const char* fn) {
    if (eval_set.empty()) throw ContractError(std::string(fn) + ": empty evaluation set");
    for (const TokenSeq& seq : eval_set) {
        if (seq.vocab != p.cfg.vocab)
            throw ConfigError(std::string(fn) + ": sequence vocab " + std::to_string(seq.vocab) +
                              " does not match model vocab " + std::to_string(p.cfg.vocab));
        if (seq.length() != std::size_t(p.cfg.seq_len))
            throw ShapeError(std::string(fn) + ": sequence length " + std::to_string(seq.length()) +
                             ", model expects " + std::to_string(p.cfg.seq_len));
        seq.validate();
        if (seq.has_mask())
            throw ContractError(std::string(fn) + ": sequences must be complete, found a mask id");
    }
}

void check_s_list(const std::vector<int32_t>& s_list, const char* fn) {
    if (s_list.empty()) throw ConfigError(std::string(fn) + ": s_list is empty");
    for (int32_t s : s_list)
        if (s < 1) throw ConfigError(std::string(fn) + ": loop count " + std::to_string(s) + " below 1");
}

// Mean NLL of the original tokens at the masked positions of x_t, one
// log-softmax per masked row in fixed order.
void accumulate_masked_nll(const Tensor& logits, const std::vector<TokenSeq>& x0,
                           const std::vector<TokenSeq>& x_t, std::size_t seq_len, real& nll_sum,
                           int64_t& n_positions) {
    const std::size_t V = logits.shape()[1];
    const std::vector<real>& val = logits.values();
    for (std::size_t b = 0; b < x_t.size(); ++b) {
        for (std::size_t i = 0; i < seq_len; ++i) {
            if (!x_t[b].is_masked(i)) continue;
            const real* row = val.data() + (b * seq_len + i) * V;
            real mx = row[0];
            for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
            real denom = 0;
            for (std::size_t v = 0; v < V; ++v) denom += std::exp(row[v] - mx);
            real lse = mx + std::log(denom);
            nll_sum += lse - row[std::size_t(x0[b].tokens[i])];
            n_positions += 1;
        }
    }
}

std::string fmt_real(real x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", static_cast<double>(x));
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char ch : s) {
        if (ch == '&')
            out += "&amp;";
        else if (ch == '<')
            out += "&lt;";
        else if (ch == '>')
            out += "&gt;";
        else
            out += ch;
    }
    return out;
}

}  // namespace

std::vector<AttentionStats> mask_attention_profile(const ModelParams& p,
                                                   const std::vector<TokenSeq>& eval_set,
                                                   real t, const std::vector<int32_t>& s_list,
                                                   uint64_t seed) {
    check_eval_set(p, eval_set, "mask_attention_profile");
    check_s_list(s_list, "mask_attention_profile");
    if (!(t > 0) || t > 1)
        throw DomainError("mask_attention_profile: t=" + fmt_real(t) + " outside (0,1]");

    const std::size_t L = std::size_t(p.cfg.seq_len);
    NoiseSchedule sched;
    Rng rng(seed);
    std::vector<TokenSeq> masked;
    std::vector<std::vector<std::size_t>> mask_idx;
    int64_t n_skipped = 0;
    for (const TokenSeq& seq : eval_set) {
        TokenSeq x_t = forward_mask(seq, sched, t, rng);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < L; ++i)
            if (x_t.is_masked(i)) idx.push_back(i);
        if (idx.empty()) {
            n_skipped += 1;
            continue;
        }
        masked.push_back(std::move(x_t));
        mask_idx.push_back(std::move(idx));
    }

    const int32_t n_m = p.cfg.loop.n_m;
    const int32_t loop_start = p.cfg.loop.loop_start;
    std::vector<AttentionStats> out;
    for (int32_t s : s_list) {
        std::vector<real> mass_sum(std::size_t(n_m) * std::size_t(s), 0);
        std::vector<int64_t> n_seen(std::size_t(n_m) * std::size_t(s), 0);
        for (std::size_t at = 0; at < masked.size(); at += kForwardChunk) {
            const std::size_t bn = std::min(kForwardChunk, masked.size() - at);
            std::vector<TokenSeq> batch(masked.begin() + long(at), masked.begin() + long(at + bn));
            RetentionFlags retain;
            retain.attention_maps = true;
            ForwardRecord rec = forward_batch(p, batch, std::vector<real>(bn, t), s, retain);
            for (std::size_t ci = 0; ci < rec.attn.size(); ++ci) {
                const AttnTag& tag = rec.attn_tags[ci];
                if (tag.loop < 1) continue;  // head and tail layers
                const std::size_t cell =
                    std::size_t(tag.layer - loop_start) * std::size_t(s) + std::size_t(tag.loop - 1);
                const AttnMaps& maps = rec.attn[ci];
                for (std::size_t b = 0; b < bn; ++b) {
                    const std::vector<std::size_t>& idx = mask_idx[at + b];
                    real total = 0;
                    for (std::size_t h = 0; h < maps.n_heads; ++h)
                        for (std::size_t q : idx) {
                            real row = 0;
                            for (std::size_t k : idx) row += maps.at(b, h, q, k);
                            total += row;
                        }
                    mass_sum[cell] += total / (real(maps.n_heads) * real(idx.size()));
                    n_seen[cell] += 1;
                }
            }
        }
        for (int32_t layer = 0; layer < n_m; ++layer)
            for (int32_t loop = 1; loop <= s; ++loop) {
                const std::size_t cell = std::size_t(layer) * std::size_t(s) + std::size_t(loop - 1);
                AttentionStats st;
                st.s = s;
                st.layer = layer;
                st.loop = loop;
                st.n_samples = n_seen[cell];
                st.n_skipped = n_skipped;
                if (n_seen[cell] > 0)
                    st.mass = std::min(real(1), std::max(real(0), mass_sum[cell] / real(n_seen[cell])));
                out.push_back(st);
            }
    }
    return out;
}

real TimestepProfile::nll_at(int32_t bin, int32_t si) const {
    return nll[std::size_t(bin) * s_list.size() + std::size_t(si)];
}

real TimestepProfile::gain_at(int32_t bin, int32_t si) const {
    return gain[std::size_t(bin) * s_list.size() + std::size_t(si)];
}

TimestepProfile timestep_gain_profile(const ModelParams& p, const std::vector<TokenSeq>& eval_set,
                                      const std::vector<int32_t>& s_list, int32_t n_bins,
                                      uint64_t seed) {
    check_eval_set(p, eval_set, "timestep_gain_profile");
    check_s_list(s_list, "timestep_gain_profile");
    if (n_bins < 1)
        throw ConfigError("timestep_gain_profile: n_bins=" + std::to_string(n_bins) + " below 1");
    if (std::find(s_list.begin(), s_list.end(), 1) == s_list.end())
        throw ConfigError("timestep_gain_profile: s_list must contain 1, the gain baseline");

    const std::size_t L = std::size_t(p.cfg.seq_len);
    const std::size_t n_s = s_list.size();
    TimestepProfile prof;
    prof.s_list = s_list;
    prof.counts.assign(std::size_t(n_bins), 0);
    prof.nll.assign(std::size_t(n_bins) * n_s, 0);
    prof.gain.assign(std::size_t(n_bins) * n_s, 0);

    NoiseSchedule sched;
    Rng rng(seed);
    const std::size_t base = std::size_t(std::find(s_list.begin(), s_list.end(), 1) - s_list.begin());
    for (int32_t bin = 0; bin < n_bins; ++bin) {
        prof.bin_lo.push_back(real(bin) / real(n_bins));
        prof.bin_hi.push_back(real(bin + 1) / real(n_bins));
        const real t = (real(bin) + real(0.5)) / real(n_bins);
        prof.bin_t.push_back(t);

        std::vector<TokenSeq> x0, x_t;
        for (const TokenSeq& seq : eval_set) {
            TokenSeq m = forward_mask(seq, sched, t, rng);
            if (!m.has_mask()) continue;
            x0.push_back(seq);
            x_t.push_back(std::move(m));
        }
        if (x0.empty()) continue;

        for (std::size_t si = 0; si < n_s; ++si) {
            real nll_sum = 0;
            int64_t n_pos = 0;
            for (std::size_t at = 0; at < x_t.size(); at += 4 * kForwardChunk) {
                const std::size_t bn = std::min(4 * kForwardChunk, x_t.size() - at);
                std::vector<TokenSeq> batch(x_t.begin() + long(at), x_t.begin() + long(at + bn));
                std::vector<TokenSeq> orig(x0.begin() + long(at), x0.begin() + long(at + bn));
                ForwardRecord rec = forward_batch(p, batch, std::vector<real>(bn, t), s_list[si]);
                accumulate_masked_nll(rec.logits, orig, batch, L, nll_sum, n_pos);
            }
            prof.nll[std::size_t(bin) * n_s + si] = nll_sum / real(n_pos);
            if (si == 0) prof.counts[std::size_t(bin)] = n_pos;
        }
        for (std::size_t si = 0; si < n_s; ++si)
            prof.gain[std::size_t(bin) * n_s + si] =
                prof.nll[std::size_t(bin) * n_s + base] - prof.nll[std::size_t(bin) * n_s + si];
    }
    return prof;
}

LoopAllocationProfile loop_allocation_profile(const std::vector<Trajectory>& trajectories,
                                              int32_t n_bins) {
    if (n_bins < 1)
        throw ConfigError("loop_allocation_profile: n_bins=" + std::to_string(n_bins) + " below 1");
    if (trajectories.empty()) throw ContractError("loop_allocation_profile: no trajectories");

    LoopAllocationProfile prof;
    for (int32_t bin = 0; bin < n_bins; ++bin) {
        prof.bin_lo.push_back(real(bin) / real(n_bins));
        prof.bin_hi.push_back(real(bin + 1) / real(n_bins));
    }
    std::vector<real> sums(std::size_t(n_bins), 0);
    prof.counts.assign(std::size_t(n_bins), 0);
    for (const Trajectory& traj : trajectories) {
        if (traj.steps.empty()) throw ContractError("loop_allocation_profile: empty trajectory");
        real t_seen = 1;  // time the first forward pass runs at
        for (const SampleStep& st : traj.steps) {
            if (!(t_seen > 0))
                throw ContractError("loop_allocation_profile: step after time reached zero");
            auto bin = std::min(std::size_t(n_bins) - 1,
                                std::size_t(std::ceil(double(t_seen) * n_bins)) - 1);
            sums[bin] += real(st.loops_used);
            prof.counts[bin] += 1;
            t_seen = st.t;
        }
    }
    for (int32_t bin = 0; bin < n_bins; ++bin)
        prof.mean_loops.push_back(prof.counts[std::size_t(bin)] > 0
                                      ? sums[std::size_t(bin)] / real(prof.counts[std::size_t(bin)])
                                      : real(0));
    return prof;
}

real generative_perplexity(const std::vector<TokenSeq>& generated, const ModelParams& scorer,
                           int32_t s) {
    check_eval_set(scorer, generated, "generative_perplexity");
    if (s < 0)
        throw ConfigError("generative_perplexity: s=" + std::to_string(s) + " below 0");
    const int32_t s_eff = s > 0 ? s : scorer.cfg.loop.s_max;

    const std::size_t L = std::size_t(scorer.cfg.seq_len);
    const real t = real(1) / real(L);  // one mask out of L positions
    real nll_sum = 0;
    int64_t n_pos = 0;
    for (const TokenSeq& seq : generated) {
        std::vector<TokenSeq> variants(L, seq);
        for (std::size_t i = 0; i < L; ++i) variants[i].tokens[i] = seq.mask_id();
        ForwardRecord rec = forward_batch(scorer, variants, std::vector<real>(L, t), s_eff);
        std::vector<TokenSeq> orig(L, seq);
        accumulate_masked_nll(rec.logits, orig, variants, L, nll_sum, n_pos);
    }
    return std::exp(nll_sum / real(n_pos));
}

std::string attention_table(const std::vector<AttentionStats>& stats) {
    std::string out = "# s\tlayer\tloop\tmass\tn_samples\tn_skipped\n";
    char buf[128];
    for (const AttentionStats& st : stats) {
        std::snprintf(buf, sizeof buf, "%d\t%d\t%d\t%.10g\t%lld\t%lld\n", st.s, st.layer, st.loop,
                      static_cast<double>(st.mass), static_cast<long long>(st.n_samples),
                      static_cast<long long>(st.n_skipped));
        out += buf;
    }
    return out;
}

std::string timestep_table(const TimestepProfile& prof) {
    std::string out = "# t_lo\tt_hi\tt_eval\tcount";
    for (int32_t s : prof.s_list) out += "\tnll_s" + std::to_string(s);
    for (int32_t s : prof.s_list) out += "\tgain_s" + std::to_string(s);
    out += '\n';
    for (int32_t bin = 0; bin < prof.n_bins(); ++bin) {
        out += fmt_real(prof.bin_lo[std::size_t(bin)]) + "\t" + fmt_real(prof.bin_hi[std::size_t(bin)]) +
               "\t" + fmt_real(prof.bin_t[std::size_t(bin)]) + "\t" +
               std::to_string(prof.counts[std::size_t(bin)]);
        for (std::size_t si = 0; si < prof.s_list.size(); ++si)
            out += "\t" + fmt_real(prof.nll_at(bin, int32_t(si)));
        for (std::size_t si = 0; si < prof.s_list.size(); ++si)
            out += "\t" + fmt_real(prof.gain_at(bin, int32_t(si)));
        out += '\n';
    }
    return out;
}

std::string allocation_table(const LoopAllocationProfile& prof) {
    std::string out = "# t_lo\tt_hi\tcount\tmean_loops\n";
    for (int32_t bin = 0; bin < prof.n_bins(); ++bin) {
        out += fmt_real(prof.bin_lo[std::size_t(bin)]) + "\t" + fmt_real(prof.bin_hi[std::size_t(bin)]) +
               "\t" + std::to_string(prof.counts[std::size_t(bin)]) + "\t" +
               fmt_real(prof.mean_loops[std::size_t(bin)]) + '\n';
    }
    return out;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series) {
    if (series.empty()) throw ContractError("svg_line_chart: no series");
    for (const ChartSeries& sr : series) {
        if (sr.x.empty()) throw ContractError("svg_line_chart: series '" + sr.label + "' is empty");
        if (sr.x.size() != sr.y.size())
            throw ShapeError("svg_line_chart: series '" + sr.label + "' has " +
                             std::to_string(sr.x.size()) + " x values and " +
                             std::to_string(sr.y.size()) + " y values");
    }

    real x_min = series[0].x[0], x_max = x_min, y_min = series[0].y[0], y_max = y_min;
    for (const ChartSeries& sr : series)
        for (std::size_t i = 0; i < sr.x.size(); ++i) {
            x_min = std::min(x_min, sr.x[i]);
            x_max = std::max(x_max, sr.x[i]);
            y_min = std::min(y_min, sr.y[i]);
            y_max = std::max(y_max, sr.y[i]);
        }
    if (x_max == x_min) {
        x_min -= real(0.5);
        x_max += real(0.5);
    }
    if (y_max == y_min) {
        y_min -= real(0.5);
        y_max += real(0.5);
    }

    const real width = 720, height = 440;
    const real ml = 70, mr = 150, mt = 40, mb = 50;
    const real pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](real x) { return ml + (x - x_min) / (x_max - x_min) * pw; };
    auto py = [&](real y) { return mt + ph - (y - y_min) / (y_max - y_min) * ph; };

    static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                     "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    constexpr std::size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"440\" "
                      "viewBox=\"0 0 720 440\">\n";
    svg += "<rect width=\"720\" height=\"440\" fill=\"white\"/>\n";
    svg += "<text x=\"" + fmt_real(ml + pw / 2) + "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"16\">" + xml_escape(title) + "</text>\n";

    char buf[256];
    const int n_ticks = 5;
    for (int i = 0; i <= n_ticks; ++i) {
        const real fx = x_min + (x_max - x_min) * real(i) / real(n_ticks);
        const real fy = y_min + (y_max - y_min) * real(i) / real(n_ticks);
        const real gx = px(fx), gy = py(fy);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.6g\" y1=\"%.6g\" x2=\"%.6g\" y2=\"%.6g\" stroke=\"#ddd\"/>\n",
                      double(gx), double(mt), double(gx), double(mt + ph));
        svg += buf;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.6g\" y1=\"%.6g\" x2=\"%.6g\" y2=\"%.6g\" stroke=\"#ddd\"/>\n",
                      double(ml), double(gy), double(ml + pw), double(gy));
        svg += buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.6g\" y=\"%.6g\" text-anchor=\"middle\" "
                      "font-family=\"sans-serif\" font-size=\"11\">%.4g</text>\n",
                      double(gx), double(mt + ph + 18), double(fx));
        svg += buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.6g\" y=\"%.6g\" text-anchor=\"end\" "
                      "font-family=\"sans-serif\" font-size=\"11\">%.4g</text>\n",
                      double(ml - 8), double(gy + 4), double(fy));
        svg += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.6g\" y=\"%.6g\" width=\"%.6g\" height=\"%.6g\" fill=\"none\" "
                  "stroke=\"#444\"/>\n",
                  double(ml), double(mt), double(pw), double(ph));
    svg += buf;
    svg += "<text x=\"" + fmt_real(ml + pw / 2) + "\" y=\"" + fmt_real(height - 10) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           xml_escape(x_label) + "</text>\n";
    svg += "<text x=\"18\" y=\"" + fmt_real(mt + ph / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
           "transform=\"rotate(-90 18 " + fmt_real(mt + ph / 2) + ")\">" +
           xml_escape(y_label) + "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const char* color = kPalette[si % kPaletteSize];
        std::string pts;
        for (std::size_t i = 0; i < series[si].x.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.6g,%.6g ", double(px(series[si].x[i])),
                          double(py(series[si].y[i])));
            pts += buf;
        }
        svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
               "\" stroke-width=\"1.8\"/>\n";
        const real ly = mt + 16 + real(18) * real(si);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.6g\" y1=\"%.6g\" x2=\"%.6g\" y2=\"%.6g\" stroke=\"%s\" "
                      "stroke-width=\"1.8\"/>\n",
                      double(width - mr + 10), double(ly), double(width - mr + 34), double(ly), color);
        svg += buf;
        svg += "<text x=\"" + fmt_real(width - mr + 40) + "\" y=\"" + fmt_real(ly + 4) +
               "\" font-family=\"sans-serif\" font-size=\"12\">" + xml_escape(series[si].label) +
               "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace loopmdm
