// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.
//
//   acceptance [--only 1,3,8] [--out DIR]
//
// Training artifacts (metrics, checkpoints, summaries) land under DIR.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relulab/analysis.hpp"
#include "relulab/attention.hpp"
#include "relulab/config.hpp"
#include "relulab/gradcheck.hpp"
#include "relulab/memory.hpp"
#include "relulab/recipes.hpp"
#include "relulab/train.hpp"
#include "../support.hpp"

namespace fs = std::filesystem;
using namespace relulab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool within(const std::vector<double>& v, double rel) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    return std::all_of(v.begin(), v.end(), [&](double x) { return std::abs(x - mean) <= rel * mean; });
}

// ---- 1 -----------------------------------------------------------------------

Outcome theorem1_law() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    const std::vector<std::size_t> ns{1, 16, 256, 1024};
    const auto rows = theorem1_report(ns, 100000, rng);
    const double elapsed = seconds_since(t0);
    Outcome o{elapsed < 30.0, ""};
    for (const auto& r : rows) {
        const double tol = r.n == 1 ? 0.10 : 0.05;
        o.pass = o.pass && r.rel_err <= tol;
        o.detail += "n=" + std::to_string(r.n) + " rel_err " + fmt(r.rel_err, 3) + "; ";
    }
    o.detail += fmt(elapsed, 3) + " s";
    return o;
}

// ---- 2 -----------------------------------------------------------------------

Outcome variance_reduction() {
    AttentionConfig with;
    with.activation = Activation::ReluScaled;
    AttentionConfig without = with;
    without.scale_factor = false;
    std::vector<double> scaled, per_n, coupled;
    Rng rng(7);
    for (std::size_t n : {64, 256, 1024}) {
        scaled.push_back(weighted_value_variance_probe(n, 10000, with, rng));
        per_n.push_back(weighted_value_variance_probe(n, 10000, without, rng) / static_cast<double>(n));
        AttentionConfig heads2 = with;
        heads2.heads = 2;
        coupled.push_back(context_variance_probe(n, 32, heads2, 4, rng));
    }
    Outcome o{within(scaled, 0.10) && within(per_n, 0.10), ""};
    o.detail = "with factor " + fmt(scaled[0]) + "/" + fmt(scaled[1]) + "/" + fmt(scaled[2]) +
               "; without, var/n " + fmt(per_n[0]) + "/" + fmt(per_n[1]) + "/" + fmt(per_n[2]) +
               "; self-attention d=32 (keys and values coupled) " + fmt(coupled[0]) + "/" + fmt(coupled[1]) + "/" +
               fmt(coupled[2]);
    return o;
}

// ---- 3 -----------------------------------------------------------------------

Outcome gradient_suite_passes() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cases = gradient_suite(3);
    const double elapsed = seconds_since(t0);
    std::size_t failed = 0;
    std::string names;
    for (const auto& c : cases) {
        if (!c.result.passed) {
            ++failed;
            names += " " + c.name;
        }
    }
    Outcome o{failed == 0 && elapsed < 120.0, ""};
    o.detail = std::to_string(cases.size() - failed) + "/" + std::to_string(cases.size()) + " cases pass" +
               (failed ? " (failed:" + names + ")" : "") + "; " + fmt(elapsed, 3) + " s";
    return o;
}

// ---- 4 -----------------------------------------------------------------------

Outcome normalization_invariants() {
    Rng rng(4);
    double worst = 0;
    std::size_t rows = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(64);
        const double scale_sd = rng.uniform(0.1, 30.0);
        Tensor x = Tensor::randn({2, n, n}, rng, scale_sd);
        Tensor mask = Tensor::zeros({n, n});
        const int kind = trial % 3;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const bool vis = kind == 0 ? true : kind == 1 ? j <= i : (j == i || rng.uniform() < 0.5);
                mask.mutable_values()[i * n + j] = vis ? 1.0 : 0.0;
            }
        }
        const double temperature = rng.uniform(0.2, 3.0);
        Tensor s = softmax_rows(x, &mask, temperature);
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                double sum = 0;
                for (std::size_t j = 0; j < n; ++j) sum += s.values()[(h * n + i) * n + j];
                worst = std::max(worst, std::abs(sum - 1.0));
                ++rows;
            }
        }
    }

    // Causality: perturbing x_j must leave rows < j bit-identical, for both activations.
    bool causal_ok = true;
    std::size_t perturbations = 0;
    for (Activation act : {Activation::Softmax, Activation::ReluScaled}) {
        AttentionConfig cfg;
        cfg.activation = act;
        cfg.heads = 2;
        cfg.causal = true;
        const std::size_t n = 12, d = 8;
        const AttentionParams p = init_attention(d, cfg, rng);
        Tensor x = Tensor::randn({n, d}, rng);
        const Tensor base = attend(x, x, p, cfg).output;
        for (std::size_t j = 0; j < n; ++j) {
            Tensor y = Tensor::from({n, d}, std::vector<double>(x.values().begin(), x.values().end()));
            for (std::size_t c = 0; c < d; ++c) y.mutable_values()[j * d + c] += rng.normal(0, 3.0);
            const Tensor out = attend(y, y, p, cfg).output;
            ++perturbations;
            for (std::size_t i = 0; i < j * d; ++i) causal_ok = causal_ok && out.values()[i] == base.values()[i];
        }
    }
    Outcome o{worst <= 1e-9 && causal_ok, ""};
    o.detail = "max |row sum - 1| " + fmt(worst, 3) + " over " + std::to_string(rows) + " rows; " +
               std::to_string(perturbations) + " causal perturbations " + (causal_ok ? "exact" : "LEAKED");
    return o;
}

// ---- 5 -----------------------------------------------------------------------

Outcome memory_ordering() {
    bool ok = true;
    double worst_plain = 0, worst_gain = 1e300;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const std::size_t d = 64, n = 128, dh = 1024;
        Tensor x = Tensor::randn({n, d}, rng);
        const MemoryConfig plain{MemoryKind::SoftmaxMemory, d, dh, 1.0};
        const MemoryConfig ln{MemoryKind::SoftmaxMemoryLn, d, dh, 1.0};
        const double rp = output_variance_ratio(memory_forward(x, init_memory(plain, rng), plain), x);
        const double rl = output_variance_ratio(memory_forward(x, init_memory(ln, rng), ln), x);
        ok = ok && rp < 0.05 && rl >= 10.0 * rp;
        worst_plain = std::max(worst_plain, rp);
        worst_gain = std::min(worst_gain, rl / rp);
    }
    return {ok, "d_h=1024, 5 seeds: max plain ratio " + fmt(worst_plain, 3) + ", min LN/plain " + fmt(worst_gain, 4)};
}

// ---- training helpers ----------------------------------------------------------

JobResult run_named(const std::string& name, const RunConfig& run, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    std::cerr << "  training " << name << " (" << run.train.steps << " steps, L=" << run.task.length_limit << ")"
              << std::endl;
    JobResult r = run_job(Job{name, Json::object(), run}, out / name);
    std::cerr << "    done in " << fmt(seconds_since(t0), 4) << " s: accuracy " << r.final_accuracy
              << (r.diverged ? " (diverged)" : "") << std::endl;
    return r;
}

ModelConfig desk_model(std::size_t max_len) {
    ModelConfig m;
    m.d = 32;
    m.d_h = 64;
    m.heads = 1;
    m.enc_layers = 1;
    m.dec_layers = 1;
    m.vocab = 16;
    m.max_len = max_len;
    m.reg.loss_weight = 0.01;
    return m;
}

RunConfig desk_run(TaskKind kind, std::size_t length, std::size_t steps, const std::string& variant) {
    RunConfig r;
    r.model = apply_variant(desk_model(length), variant);
    r.task.kind = kind;
    r.task.length_limit = length;
    // key-lookup splits the content tokens into key, value and filler thirds,
    // and needs two encoder layers to tie each value to the key before it
    if (kind == TaskKind::KeyLookup) {
        r.model.vocab = 32;
        r.model.enc_layers = 2;
    }
    r.task.vocab = r.model.vocab;
    r.task.examples = 1000;
    r.train.steps = steps;
    r.train.batch_tokens = 2048;
    r.train.schedule = {1e-2, 100};
    r.train.log_every = 20;
    r.train.eval_examples = 16;
    return r;
}

// ---- 6 -----------------------------------------------------------------------

Outcome regularizer_behavior(const fs::path& out) {
    std::string detail;
    bool ok = true;
    for (bool causal : {false, true}) {
        const auto r = testing::minimize_reg(64, causal, 6);
        ok = ok && r.steps <= 2000 && r.worst_log_sum < 1e-3;
        detail += std::string(causal ? "causal" : "full") + " |ln sum| " + fmt(r.worst_log_sum, 2) + " at step " +
                  std::to_string(r.steps) + "; ";
    }
    const std::size_t length = 64, steps = 3000;
    const JobResult noreg = run_named("c6-no-reg", desk_run(TaskKind::Copy, length, steps, "no-reg"), out);
    RunConfig strong = desk_run(TaskKind::Copy, length, steps, "reluformer");
    strong.model.reg.loss_weight = 0.1;
    const JobResult full = run_named("c6-reluformer-lambda0.1", strong, out);
    const JobResult weak = run_named("c6-reluformer-lambda0.01", desk_run(TaskKind::Copy, length, steps, "reluformer"), out);
    ok = ok && full.mean_entropy > noreg.mean_entropy && noreg.zero_fraction > 0.5;
    detail += "entropy reluformer(lambda 0.1) " + fmt(full.mean_entropy) + " vs no-reg " + fmt(noreg.mean_entropy) +
              " [lambda 0.01: " + fmt(weak.mean_entropy) + "]; no-reg zero fraction " + fmt(noreg.zero_fraction);
    return {ok, detail};
}

// ---- 7 -----------------------------------------------------------------------

Outcome centralization_ordering() {
    bool ok = true;
    std::string detail;
    for (double sd : {2.0, 4.0}) {
        const auto c = testing::centralization(4096, 1000, sd, 0.2, 77);
        ok = ok && c.softmax_mass > c.relu_mass;
        detail += "std " + fmt(sd, 2) + ": softmax " + fmt(c.softmax_mass) + " > relu " + fmt(c.relu_mass) + "; ";
    }
    detail.resize(detail.size() - 2);
    return {ok, detail};
}

// ---- 8 -----------------------------------------------------------------------

Outcome convergence_contrast(const fs::path& out) {
    const std::size_t length = 1024, steps = 12000;
    const JobResult relu = run_named("c8-reluformer", desk_run(TaskKind::Copy, length, steps, "reluformer"), out);
    RunConfig ns = desk_run(TaskKind::Copy, length, 2000, "no-scale");
    const JobResult noscale = run_named("c8-no-scale", ns, out);
    const JobResult vanilla = run_named("c8-vanilla", desk_run(TaskKind::Copy, length, steps, "vanilla"), out);
    const bool ok = !relu.diverged && relu.final_accuracy >= 0.95 && noscale.diverged && !vanilla.diverged &&
                    vanilla.final_accuracy >= 0.95;
    std::string detail = "reluformer " + fmt(relu.final_accuracy) + "; no-scale " +
                         (noscale.diverged ? "diverged at step " + std::to_string(noscale.steps_run)
                                           : "no divergence, accuracy " + fmt(noscale.final_accuracy)) +
                         "; vanilla " + fmt(vanilla.final_accuracy);
    return {ok, detail};
}

// ---- 9 -----------------------------------------------------------------------

Outcome long_sequence_trend(const fs::path& out) {
    bool ok = true;
    std::string detail;
    for (std::size_t length : {128, 1024}) {
        for (std::uint64_t seed : {1, 2, 3}) {
            const std::size_t steps = length == 128 ? 2000 : 3000;
            RunConfig relu = desk_run(TaskKind::KeyLookup, length, steps, "reluformer");
            RunConfig soft = desk_run(TaskKind::KeyLookup, length, steps, "vanilla");
            relu.override_seed(seed);
            soft.override_seed(seed);
            const std::string tag = "L" + std::to_string(length) + "-s" + std::to_string(seed);
            const JobResult r = run_named("c9-reluformer-" + tag, relu, out);
            const JobResult s = run_named("c9-vanilla-" + tag, soft, out);
            if (length == 1024) ok = ok && r.final_accuracy >= s.final_accuracy - 0.01;
            detail += tag + " relu " + fmt(r.final_accuracy, 3) + " vs softmax " + fmt(s.final_accuracy, 3) + "; ";
        }
    }
    detail.resize(detail.size() - 2);
    return {ok, detail};
}

// ---- 10 ----------------------------------------------------------------------

Outcome determinism(const fs::path& out) {
    RunConfig run = desk_run(TaskKind::Copy, 32, 40, "reluformer");
    run.model.heads = 2;
    run.model.dropout = 0.1;
    auto once = [&](const std::string& name) {
        run_named(name, run, out);
        auto read = [&](const char* f) {
            std::ifstream in(out / name / f, std::ios::binary);
            std::stringstream s;
            s << in.rdbuf();
            return s.str();
        };
        return std::make_pair(read("checkpoint.json"), read("metrics.csv"));
    };
    const auto a = once("c10-a"), b = once("c10-b");
    const bool ok = !a.first.empty() && a.first == b.first && a.second == b.second;
    return {ok, "checkpoints " + std::string(a.first == b.first ? "identical" : "DIFFER") + " (" +
                    std::to_string(a.first.size()) + " bytes), metrics " +
                    (a.second == b.second ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    std::string out_dir = (fs::temp_directory_path() / "relulab_acceptance").string();
    std::vector<int> expect_fail;
    app.add_option("--only", only, "Criteria to run")->delimiter(',');
    app.add_option("--expect-fail", expect_fail, "Criteria known to fail; exit status tolerates exactly these")
        ->delimiter(',');
    std::string report_path;
    app.add_option("--out", out_dir, "Directory for training artifacts");
    app.add_option("--report", report_path, "Also write the PASS/FAIL lines to this file");
    CLI11_PARSE(app, argc, argv);
    const fs::path out(out_dir);
    fs::create_directories(out);

    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "relu variance law", theorem1_law},
        {2, "variance-reduction factor", variance_reduction},
        {3, "gradient suite", gradient_suite_passes},
        {4, "normalization invariants", normalization_invariants},
        {5, "memory variance ordering at init", memory_ordering},
        {6, "regularizer behavior", [&] { return regularizer_behavior(out); }},
        {7, "centralization ordering", centralization_ordering},
        {8, "convergence contrast on copy L=1024", [&] { return convergence_contrast(out); }},
        {9, "long-sequence trend on key-lookup", [&] { return long_sequence_trend(out); }},
        {10, "determinism", [&] { return determinism(out); }},
    };

    const std::set<int> selected(only.begin(), only.end());
    std::ofstream report;
    if (!report_path.empty()) report.open(report_path);
    auto emit = [&](const std::string& line) {
        std::cout << line << std::endl;
        if (report.is_open()) report << line << std::endl;
    };
    const std::set<int> expected(expect_fail.begin(), expect_fail.end());
    int passed = 0, run = 0, surprises = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        ++run;
        passed += o.pass;
        if (o.pass == expected.count(c.id) > 0) ++surprises;
        emit(std::string(o.pass ? "PASS" : "FAIL") + "  " + std::to_string(c.id) + ". " + c.name + ": " + o.detail +
             " [" + fmt(seconds_since(t0), 4) + " s]");
    }
    std::string summary = std::to_string(passed) + "/" + std::to_string(run) + " criteria pass";
    if (!expected.empty()) {
        summary += " (" + std::to_string(surprises) + " outcome(s) differ from the expected-failure list)";
    }
    emit(summary);
    return surprises == 0 ? 0 : 1;
}
