// relulab command-line entry point.
//
// Exit codes: 0 success, 1 contract violation or bad usage, 2 divergence (train).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relulab/analysis.hpp"
#include "relulab/config.hpp"
#include "relulab/gradcheck.hpp"
#include "relulab/recipes.hpp"

namespace fs = std::filesystem;
using namespace relulab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitDiverged = 2;

fs::path default_out() {
    const char* env = std::getenv("RELULAB_OUT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

void write_summary(const fs::path& dir, const Json& summary) {
    fs::create_directories(dir);
    std::ofstream out(dir / "summary.json");
    out << summary.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + (dir / "summary.json").string());
}

std::ofstream open_csv(const fs::path& path) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

Json divergence_json(const DivergenceReport& d) {
    return Json{{"step", d.step},
                {"loss", std::isfinite(d.loss) ? Json(d.loss) : Json(std::to_string(d.loss))},
                {"initial_loss", d.initial_loss},
                {"reason", d.reason}};
}

RunConfig load_run_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
    RunConfig cfg;
    if (!path.empty()) from_json(load_config_file(path), cfg);
    if (seed) cfg.override_seed(*seed);
    return cfg;
}

// Task used by the checkpoint-reading verbs: from the config when given,
// otherwise a copy task that fits the model.
TaskSpec analysis_task(const std::string& config_path, const ModelConfig& model, std::size_t examples,
                       const std::optional<std::uint64_t>& seed) {
    TaskSpec task;
    if (!config_path.empty()) {
        task = load_run_config(config_path, seed).task;
    } else {
        task.vocab = model.vocab;
        task.length_limit = std::min<std::size_t>(model.max_len, 64);
        if (seed) task.seed = *seed;
    }
    task.examples = examples;
    return task;
}

int cmd_train(const std::string& config, const fs::path& out, const std::optional<std::uint64_t>& seed) {
    const RunConfig run = load_run_config(config, seed);
    const Json cfg_json = run;
    write_manifest(out, cfg_json, run.model.seed, "train");
    const JobResult r = run_job(Job{"train", Json::object(), run}, out);
    Json summary = to_json(r);
    summary["config_hash"] = config_hash(cfg_json);
    if (r.divergence) summary["divergence"] = divergence_json(*r.divergence);
    write_summary(out, summary);
    if (r.divergence) {
        std::cerr << "divergence at step " << r.divergence->step << ": " << r.divergence->reason << " (loss "
                  << r.divergence->loss << ", initial " << r.divergence->initial_loss << ")\n";
        return kExitDiverged;
    }
    std::cout << "final accuracy " << r.final_accuracy << " after " << r.steps_run << " steps\n";
    return kExitOk;
}

int cmd_sweep(const std::string& config, const fs::path& out, const std::optional<std::uint64_t>& seed,
              std::size_t jobs) {
    Json doc = load_config_file(config);
    Recipe recipe = recipe_from_json(doc);
    if (seed) {
        for (auto& job : recipe.jobs) job.run.override_seed(*seed);
        doc["seed_override"] = *seed;
    }
    write_manifest(out, doc, seed.value_or(recipe.jobs.front().run.model.seed), "sweep");
    const std::vector<JobResult> results = run_recipe(recipe, out, jobs);
    Json summary{{"recipe", recipe.name}, {"config_hash", config_hash(doc)}, {"jobs", Json::array()}};
    for (const auto& r : results) {
        Json j = to_json(r);
        if (r.divergence) j["divergence"] = divergence_json(*r.divergence);
        summary["jobs"].push_back(j);
    }
    write_summary(out, summary);
    std::cout << recipe.name << ": " << results.size() << " jobs, results in " << (out / (recipe.name + ".csv")).string()
              << '\n';
    return kExitOk;
}

int cmd_analyze(const std::string& checkpoint, const std::string& config, const fs::path& out,
                const std::optional<std::uint64_t>& seed, std::size_t examples, const std::vector<double>& p_grid,
                const std::string& tag) {
    const Model model = restore_model(load_checkpoint(checkpoint));
    const TaskSpec task = analysis_task(config, model.config(), examples, seed);
    const std::vector<Example> slice = generate(task);
    write_manifest(out, Json{{"checkpoint", checkpoint}, {"task", task}, {"p_grid", p_grid}}, task.seed, "analyze");

    std::vector<SiteTopP> attn = attention_top_p(model, slice, p_grid, tag);
    attn.push_back(mean_top_p(attn));
    std::vector<SiteTopP> mem = memory_top_p(model, slice, p_grid, tag);
    mem.push_back(mean_top_p(mem));
    const EntropyReport entropy = entropy_report(model, slice, tag);
    const std::vector<MemoryStats> memory = memory_report(model, slice);

    auto f1 = open_csv(out / "top_p.csv");
    write_top_p_csv(f1, attn);
    auto f2 = open_csv(out / "memory_top_p.csv");
    write_top_p_csv(f2, mem);
    auto f3 = open_csv(out / "entropy.csv");
    write_entropy_csv(f3, entropy);
    auto f4 = open_csv(out / "memory.csv");
    write_memory_csv(f4, tag, memory);

    Json summary{{"model_tag", tag},
                 {"examples", slice.size()},
                 {"mean_entropy", entropy.overall.mean_entropy},
                 {"median_entropy", entropy.overall.median_entropy},
                 {"zero_fraction", entropy.overall.zero_fraction},
                 {"accuracy", evaluate_accuracy(model, slice)}};
    write_summary(out, summary);
    std::cout << "mean entropy " << entropy.overall.mean_entropy << ", zero fraction " << entropy.overall.zero_fraction
              << '\n';
    return kExitOk;
}

int cmd_theorem1(const std::vector<std::size_t>& ns, std::size_t trials, std::uint64_t seed, const fs::path& out) {
    Rng rng(seed);
    const std::vector<Theorem1Row> rows = theorem1_report(ns, trials, rng);
    write_manifest(out, Json{{"n", ns}, {"trials", trials}}, seed, "verify-theorem1");
    auto csv = open_csv(out / "theorem1.csv");
    write_theorem1_csv(csv, rows);
    write_theorem1_csv(std::cout, rows);
    Json summary{{"rows", Json::array()}};
    bool all_within = true;
    for (const auto& r : rows) {
        const double tol = r.n == 1 ? 0.10 : 0.05;
        const bool ok = r.rel_err <= tol;
        all_within = all_within && ok;
        summary["rows"].push_back(Json{{"n", r.n},
                                       {"empirical_var", r.empirical_var},
                                       {"predicted_var", r.predicted_var},
                                       {"rel_err", r.rel_err},
                                       {"tolerance", tol},
                                       {"within_tolerance", ok}});
    }
    summary["within_tolerance"] = all_within;
    write_summary(out, summary);
    return kExitOk;
}

int cmd_dump_attention(const std::string& checkpoint, const std::string& config, const fs::path& out,
                       const std::optional<std::uint64_t>& seed, std::size_t example, const std::string& site) {
    const Model model = restore_model(load_checkpoint(checkpoint));
    const TaskSpec task = analysis_task(config, model.config(), example + 1, seed);
    const std::vector<Example> data = generate(task);
    const Example& ex = data.at(example);
    write_manifest(out, Json{{"checkpoint", checkpoint}, {"task", task}, {"example", example}}, task.seed,
                   "dump-attention");

    NoGradGuard guard;
    const ForwardResult r = forward(model, ex.src, ex.tgt);
    auto csv = open_csv(out / "attention.csv");
    csv << "site,head,query,key,weight\n";
    csv.precision(17);
    std::size_t sites = 0;
    for (const auto& d : r.diagnostics) {
        if (!site.empty() && d.site != site) continue;
        ++sites;
        const auto& s = d.scores;
        const auto w = s.weights.values();
        for (std::size_t h = 0; h < s.heads(); ++h) {
            for (std::size_t i = 0; i < s.query_count(); ++i) {
                for (std::size_t j = 0; j < s.effective_lengths[i]; ++j) {
                    csv << d.site << ',' << h << ',' << i << ',' << j << ','
                        << w[(h * s.query_count() + i) * s.key_count() + j] << '\n';
                }
            }
        }
    }
    if (sites == 0) throw ContractViolation("dump-attention: no attention site named '" + site + "'");
    write_summary(out, Json{{"example", example}, {"sites", sites}, {"src_len", ex.src.size()}, {"tgt_len", ex.tgt.size()}});
    return kExitOk;
}

int cmd_gradcheck(bool micro, std::uint64_t seed, const fs::path& out) {
    const std::vector<GradCheckCase> cases = gradient_suite(seed, micro);
    Json summary{{"cases", Json::array()}};
    bool all = true;
    for (const auto& c : cases) {
        all = all && c.result.passed;
        std::cout << (c.result.passed ? "ok   " : "FAIL ") << c.name << "  checked=" << c.result.checked
                  << " worst_abs=" << c.result.worst_abs_error << '\n';
        summary["cases"].push_back(Json{{"name", c.name},
                                        {"passed", c.result.passed},
                                        {"checked", c.result.checked},
                                        {"failures", c.result.failures},
                                        {"worst_abs_error", c.result.worst_abs_error},
                                        {"worst_rel_error", c.result.worst_rel_error}});
    }
    summary["passed"] = all;
    write_manifest(out, Json{{"micro", micro}}, seed, "gradcheck");
    write_summary(out, summary);
    return all ? kExitOk : kExitContract;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transformer ReLU/softmax laboratory"};
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", artifact_version());

    std::string config, checkpoint, site, tag = "model";
    std::string out_arg;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1, examples = 16, example = 0, trials = 100000;
    std::vector<std::size_t> ns{1, 16, 256, 1024};
    std::vector<double> p_grid{0.2, 0.5, 1, 2, 5, 10, 20, 50, 100};
    bool micro = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--out", out_arg, "Output directory (default: $RELULAB_OUT or ./runs)");
        sub->add_option("--seed", seed, "Seed override");
    };

    auto* train = app.add_subcommand("train", "Train one model from a config");
    train->add_option("--config", config, "Run config (YAML)")->required()->check(CLI::ExistingFile);
    common(train);

    auto* sweep = app.add_subcommand("sweep", "Run an experiment recipe");
    sweep->add_option("--config", config, "Recipe file (YAML)")->required()->check(CLI::ExistingFile);
    sweep->add_option("--jobs", jobs, "Jobs run in parallel")->check(CLI::PositiveNumber);
    common(sweep);

    auto* analyze = app.add_subcommand("analyze", "Entropy, top-p and memory reports for a checkpoint");
    analyze->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    analyze->add_option("--config", config, "Run config whose task section supplies the data")
        ->check(CLI::ExistingFile);
    analyze->add_option("--examples", examples, "Examples to analyze")->check(CLI::PositiveNumber);
    analyze->add_option("--p", p_grid, "Top-p grid in percent");
    analyze->add_option("--tag", tag, "Model tag written to the CSVs");
    common(analyze);

    auto* theorem = app.add_subcommand("verify-theorem1", "Monte-Carlo check of the ReLU variance law");
    theorem->add_option("--n", ns, "Sequence lengths");
    theorem->add_option("--trials", trials, "Trials per length (>= 1000)");
    common(theorem);

    auto* dump = app.add_subcommand("dump-attention", "Write the attention maps of one example");
    dump->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    dump->add_option("--config", config, "Run config whose task section supplies the data")->check(CLI::ExistingFile);
    dump->add_option("--example", example, "Example index");
    dump->add_option("--site", site, "Only this site, e.g. dec0.cross");
    common(dump);

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    grad->add_flag("--micro", micro, "Only the micro full-model checks");
    common(grad);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return kExitContract;
    }

    const fs::path out = out_arg.empty() ? default_out() : fs::path(out_arg);
    try {
        if (*train) return cmd_train(config, out, seed);
        if (*sweep) return cmd_sweep(config, out, seed, jobs);
        if (*analyze) return cmd_analyze(checkpoint, config, out, seed, examples, p_grid, tag);
        if (*theorem) return cmd_theorem1(ns, trials, seed.value_or(0), out);
        if (*dump) return cmd_dump_attention(checkpoint, config, out, seed, example, site);
        if (*grad) return cmd_gradcheck(micro, seed.value_or(0), out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitContract;
    }
    return kExitContract;
}
