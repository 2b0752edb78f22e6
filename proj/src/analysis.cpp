#include "relulab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>

#include "relulab/regularizer.hpp"
#include "relulab/tasks.hpp"

namespace relulab {

std::string to_string(ScoreSource source) { return source == ScoreSource::Attention ? "attention" : "ffn-memory"; }

namespace {

// Number of entries in the top p% of n, at least one.
std::size_t top_count(double p, std::size_t n) {
    const double raw = p / 100.0 * static_cast<double>(n);
    const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace

TopPReport top_p_mass(const ScoreDistribution& s, std::span<const double> p_grid, ScoreSource source,
                      std::string model_tag) {
    if (p_grid.empty()) throw ContractViolation("top_p_mass: empty p grid");
    for (double p : p_grid) {
        if (!(p > 0.0 && p <= 100.0)) throw ContractViolation("top_p_mass: p must be in (0, 100]");
    }
    const std::size_t heads = s.heads(), rows = s.query_count(), cols = s.key_count();
    if (s.effective_lengths.size() != rows) throw DimensionError("top_p_mass: effective lengths do not match rows");

    TopPReport report;
    report.p_grid.assign(p_grid.begin(), p_grid.end());
    report.mass.assign(p_grid.size(), 0.0);
    report.source = source;
    report.model_tag = std::move(model_tag);

    const auto w = s.weights.values();
    std::vector<double> row;
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < rows; ++i) {
            const std::size_t n = s.effective_lengths[i];
            if (n == 0 || n > cols) throw ContractViolation("top_p_mass: invalid effective length");
            const auto first = w.begin() + static_cast<std::ptrdiff_t>((h * rows + i) * cols);
            row.assign(first, first + static_cast<std::ptrdiff_t>(n));
            double total = 0.0;
            for (double v : row) {
                if (v < 0.0) throw ContractViolation("top_p_mass: negative score");
                total += v;
            }
            if (total <= 0.0) continue;
            if (s.kind == Activation::ReluScaled) {
                for (auto& v : row) v /= total;
            }
            std::sort(row.begin(), row.end(), std::greater<>());
            for (std::size_t k = 1; k < n; ++k) row[k] += row[k - 1];
            for (std::size_t g = 0; g < p_grid.size(); ++g) report.mass[g] += row[top_count(p_grid[g], n) - 1];
            ++report.rows;
        }
    }
    if (report.rows == 0) throw ContractViolation("top_p_mass: every row is all-zero");
    for (auto& m : report.mass) m /= static_cast<double>(report.rows);
    return report;
}

ScoreDistribution memory_score_distribution(const Tensor& slot_scores, MemoryKind kind) {
    if (slot_scores.rank() != 2) throw DimensionError("memory scores must be [n x d_h]");
    const std::size_t n = slot_scores.dim(0), dh = slot_scores.dim(1);
    ScoreDistribution s;
    s.weights = reshape(slot_scores.detach(), {1, n, dh});
    s.effective_lengths.assign(n, dh);
    s.kind = kind == MemoryKind::ReluFfn ? Activation::ReluScaled : Activation::Softmax;
    return s;
}

double anisotropy(const Tensor& values) {
    if (values.rank() != 2) throw DimensionError("anisotropy: values must be [d_h x d]");
    const std::size_t rows = values.dim(0), d = values.dim(1);
    if (rows < 2) throw ContractViolation("anisotropy: need at least two value slots");
    const auto v = values.values();
    // sum_{i != j} <u_i, u_j> = |sum_i u_i|^2 - sum_i |u_i|^2 for unit rows u_i.
    std::vector<double> total(d, 0.0);
    double self = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        double norm2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) norm2 += v[i * d + c] * v[i * d + c];
        if (norm2 == 0.0) throw ContractViolation("anisotropy: value slot " + std::to_string(i) + " has zero norm");
        const double inv = 1.0 / std::sqrt(norm2);
        double unit2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double u = v[i * d + c] * inv;
            total[c] += u;
            unit2 += u * u;
        }
        self += unit2;
    }
    double cross = -self;
    for (double t : total) cross += t * t;
    return cross / (static_cast<double>(rows) * static_cast<double>(rows - 1));
}

EntropyStats entropy_stats(std::string site, std::span<const ScoreDistribution> distributions) {
    EntropyStats stats;
    stats.site = std::move(site);
    std::vector<double> entropies;
    std::size_t zeros = 0, visible = 0;
    for (const auto& s : distributions) {
        Tensor h;
        {
            NoGradGuard guard;
            ScoreDistribution detached{s.weights.detach(), s.effective_lengths, s.kind};
            h = entropy(detached, true);
        }
        entropies.insert(entropies.end(), h.values().begin(), h.values().end());
        const std::size_t heads = s.heads(), rows = s.query_count(), cols = s.key_count();
        const auto w = s.weights.values();
        for (std::size_t hd = 0; hd < heads; ++hd) {
            for (std::size_t i = 0; i < rows; ++i) {
                const std::size_t n = s.effective_lengths[i];
                const double* row = w.data() + (hd * rows + i) * cols;
                visible += n;
                zeros += static_cast<std::size_t>(std::count(row, row + n, 0.0));
            }
        }
    }
    if (entropies.empty()) throw ContractViolation("entropy_stats: no rows");
    stats.rows = entropies.size();
    double total = 0.0;
    for (double e : entropies) total += e;
    stats.mean_entropy = total / static_cast<double>(entropies.size());
    const std::size_t mid = entropies.size() / 2;
    std::nth_element(entropies.begin(), entropies.begin() + static_cast<std::ptrdiff_t>(mid), entropies.end());
    double median = entropies[mid];
    if (entropies.size() % 2 == 0) {
        median = 0.5 * (median + *std::max_element(entropies.begin(), entropies.begin() + static_cast<std::ptrdiff_t>(mid)));
    }
    stats.median_entropy = median;
    stats.zero_fraction = static_cast<double>(zeros) / static_cast<double>(visible);
    return stats;
}

EntropyReport entropy_report(const Model& model, std::span<const Example> slice, std::string model_tag) {
    if (slice.empty()) throw ContractViolation("entropy_report: empty dataset slice");
    NoGradGuard guard;
    std::vector<std::string> names;
    std::vector<std::vector<ScoreDistribution>> per_site;
    for (const auto& ex : slice) {
        ForwardResult r = forward(model, ex.src, ex.tgt);
        if (per_site.empty()) {
            per_site.resize(r.diagnostics.size());
            for (const auto& d : r.diagnostics) names.push_back(d.site);
        }
        for (std::size_t i = 0; i < r.diagnostics.size(); ++i) per_site[i].push_back(r.diagnostics[i].scores);
    }
    EntropyReport report;
    report.model_tag = std::move(model_tag);
    std::vector<ScoreDistribution> all;
    for (std::size_t i = 0; i < per_site.size(); ++i) {
        report.sites.push_back(entropy_stats(names[i], per_site[i]));
        all.insert(all.end(), per_site[i].begin(), per_site[i].end());
    }
    report.overall = entropy_stats("all", all);
    return report;
}

std::vector<MemoryStats> memory_report(const Model& model, std::span<const Example> slice) {
    if (slice.empty()) throw ContractViolation("memory_report: empty dataset slice");
    NoGradGuard guard;
    ForwardOptions opts;
    opts.collect_memory = true;
    std::vector<std::string> names;
    std::vector<std::vector<double>> outputs, residuals;
    for (const auto& ex : slice) {
        ForwardResult r = forward(model, ex.src, ex.tgt, opts);
        if (names.empty()) {
            for (const auto& m : r.memory) names.push_back(m.site);
            outputs.resize(names.size());
            residuals.resize(names.size());
        }
        for (std::size_t i = 0; i < r.memory.size(); ++i) {
            const auto o = r.memory[i].block_output.values();
            const auto x = r.memory[i].residual_input.values();
            outputs[i].insert(outputs[i].end(), o.begin(), o.end());
            residuals[i].insert(residuals[i].end(), x.begin(), x.end());
        }
    }
    std::vector<const MemoryParams*> blocks;
    for (const auto& l : model.encoder) blocks.push_back(&l.ffn);
    for (const auto& l : model.decoder) blocks.push_back(&l.ffn);

    std::vector<MemoryStats> stats;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const std::size_t n = outputs[i].size();
        MemoryStats m;
        m.site = names[i];
        m.variance_ratio = output_variance_ratio(Tensor::from({n}, outputs[i]), Tensor::from({n}, residuals[i]));
        m.anisotropy = anisotropy(blocks[i]->values);
        stats.push_back(m);
    }
    return stats;
}

namespace {

std::vector<SiteTopP> pooled_top_p(const std::vector<std::string>& names,
                                   const std::vector<std::vector<ScoreDistribution>>& per_site,
                                   std::span<const double> p_grid, ScoreSource source, const std::string& tag) {
    std::vector<SiteTopP> out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        TopPReport pooled;
        pooled.p_grid.assign(p_grid.begin(), p_grid.end());
        pooled.mass.assign(p_grid.size(), 0.0);
        pooled.source = source;
        pooled.model_tag = tag;
        for (const auto& s : per_site[i]) {
            TopPReport r = top_p_mass(s, p_grid, source, tag);
            for (std::size_t g = 0; g < p_grid.size(); ++g) pooled.mass[g] += r.mass[g] * static_cast<double>(r.rows);
            pooled.rows += r.rows;
        }
        for (auto& m : pooled.mass) m /= static_cast<double>(pooled.rows);
        out.push_back({names[i], std::move(pooled)});
    }
    return out;
}

}  // namespace

std::vector<SiteTopP> attention_top_p(const Model& model, std::span<const Example> slice,
                                      std::span<const double> p_grid, std::string model_tag) {
    if (slice.empty()) throw ContractViolation("attention_top_p: empty dataset slice");
    NoGradGuard guard;
    std::vector<std::string> names;
    std::vector<std::vector<ScoreDistribution>> per_site;
    for (const auto& ex : slice) {
        ForwardResult r = forward(model, ex.src, ex.tgt);
        if (names.empty()) {
            for (const auto& d : r.diagnostics) names.push_back(d.site);
            per_site.resize(names.size());
        }
        for (std::size_t i = 0; i < r.diagnostics.size(); ++i) per_site[i].push_back(r.diagnostics[i].scores);
    }
    return pooled_top_p(names, per_site, p_grid, ScoreSource::Attention, model_tag);
}

std::vector<SiteTopP> memory_top_p(const Model& model, std::span<const Example> slice,
                                   std::span<const double> p_grid, std::string model_tag) {
    if (slice.empty()) throw ContractViolation("memory_top_p: empty dataset slice");
    NoGradGuard guard;
    ForwardOptions opts;
    opts.collect_memory = true;
    std::vector<std::string> names;
    std::vector<std::vector<ScoreDistribution>> per_site;
    for (const auto& ex : slice) {
        ForwardResult r = forward(model, ex.src, ex.tgt, opts);
        if (names.empty()) {
            for (const auto& m : r.memory) names.push_back(m.site);
            per_site.resize(names.size());
        }
        for (std::size_t i = 0; i < r.memory.size(); ++i) {
            per_site[i].push_back(memory_score_distribution(r.memory[i].slot_scores, model.config().memory_kind));
        }
    }
    return pooled_top_p(names, per_site, p_grid, ScoreSource::FfnMemory, model_tag);
}

SiteTopP mean_top_p(std::span<const SiteTopP> curves) {
    if (curves.empty()) throw ContractViolation("mean_top_p: no curves");
    SiteTopP mean{"mean", curves.front().report};
    std::fill(mean.report.mass.begin(), mean.report.mass.end(), 0.0);
    mean.report.rows = 0;
    for (const auto& c : curves) {
        if (c.report.p_grid != mean.report.p_grid) throw ContractViolation("mean_top_p: curves use different grids");
        for (std::size_t g = 0; g < c.report.mass.size(); ++g) mean.report.mass[g] += c.report.mass[g];
        mean.report.rows += c.report.rows;
    }
    for (auto& m : mean.report.mass) m /= static_cast<double>(curves.size());
    return mean;
}

std::vector<Theorem1Row> theorem1_report(std::span<const std::size_t> n_list, std::size_t trials, Rng& rng) {
    std::vector<Theorem1Row> rows;
    for (std::size_t n : n_list) {
        Theorem1Row row;
        row.n = n;
        row.trials = trials;
        row.empirical_var = san_output_variance_probe(n, trials, rng);
        row.predicted_var = static_cast<double>(n) / 2.0;
        row.rel_err = std::abs(row.empirical_var - row.predicted_var) / row.predicted_var;
        rows.push_back(row);
    }
    return rows;
}

double weighted_value_variance_probe(std::size_t n, std::size_t rows, const AttentionConfig& cfg, Rng& rng) {
    if (n == 0 || rows == 0) throw ContractViolation("weighted_value_variance_probe: n and rows must be positive");
    NoGradGuard guard;
    const Tensor logits = Tensor::randn({1, rows, n}, rng);
    const std::vector<std::size_t> lengths(rows, n);
    const Tensor w = attention_weights(logits, lengths, nullptr, cfg);
    const auto wv = w.values();
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double y = 0.0;
        for (std::size_t j = 0; j < n; ++j) y += wv[r * n + j] * rng.normal();
        sum += y;
        sum2 += y * y;
    }
    const double mean = sum / static_cast<double>(rows);
    return sum2 / static_cast<double>(rows) - mean * mean;
}

double context_variance_probe(std::size_t n, std::size_t d, const AttentionConfig& cfg, std::size_t draws, Rng& rng) {
    if (draws == 0) throw ContractViolation("context_variance_probe: draws must be positive");
    NoGradGuard guard;
    double sum = 0.0, sum2 = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < draws; ++t) {
        AttentionParams p = init_attention(d, cfg, rng);
        Tensor x = Tensor::randn({n, d}, rng);
        AttentionOutput out = attend(x, x, p, cfg);
        for (double v : out.context.values()) {
            sum += v;
            sum2 += v * v;
        }
        count += out.context.numel();
    }
    const double mean = sum / static_cast<double>(count);
    return sum2 / static_cast<double>(count) - mean * mean;
}

// ---- CSV ----------------------------------------------------------------

void write_top_p_csv(std::ostream& out, std::span<const SiteTopP> curves) {
    out << "model_tag,layer,p,mass\n";
    out.precision(17);
    for (const auto& c : curves) {
        for (std::size_t g = 0; g < c.report.p_grid.size(); ++g) {
            out << c.report.model_tag << ',' << c.site << ',' << c.report.p_grid[g] << ',' << c.report.mass[g] << '\n';
        }
    }
}

void write_entropy_csv(std::ostream& out, const EntropyReport& report) {
    out << "model_tag,layer,mean_entropy,zero_fraction\n";
    out.precision(17);
    for (const auto& s : report.sites) {
        out << report.model_tag << ',' << s.site << ',' << s.mean_entropy << ',' << s.zero_fraction << '\n';
    }
    out << report.model_tag << ',' << report.overall.site << ',' << report.overall.mean_entropy << ','
        << report.overall.zero_fraction << '\n';
}

void write_memory_csv(std::ostream& out, const std::string& model_tag, std::span<const MemoryStats> stats) {
    out << "model_tag,layer,variance_ratio,anisotropy\n";
    out.precision(17);
    for (const auto& s : stats) out << model_tag << ',' << s.site << ',' << s.variance_ratio << ',' << s.anisotropy << '\n';
}

void write_theorem1_csv(std::ostream& out, std::span<const Theorem1Row> rows) {
    out << "n,trials,empirical_var,predicted_var,rel_err\n";
    out.precision(17);
    for (const auto& r : rows) {
        out << r.n << ',' << r.trials << ',' << r.empirical_var << ',' << r.predicted_var << ',' << r.rel_err << '\n';
    }
}

}  // namespace relulab
