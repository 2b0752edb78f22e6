#include "relulab/recipes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "relulab/analysis.hpp"

namespace relulab {

ModelConfig apply_variant(ModelConfig cfg, const std::string& variant) {
    if (variant == "vanilla") return vanilla_variant(std::move(cfg));
    if (variant == "reluformer") return reluformer_variant(std::move(cfg));
    if (variant == "no-scale") {
        cfg = reluformer_variant(std::move(cfg));
        cfg.attention.scale_factor = false;
        return cfg;
    }
    if (variant == "no-reg") {
        cfg = reluformer_variant(std::move(cfg));
        cfg.reg.enabled = false;
        return cfg;
    }
    throw ContractViolation("unknown model variant '" + variant + "'");
}

std::vector<std::size_t> doubling_grid(std::size_t lo, std::size_t hi) {
    if (lo == 0 || lo > hi) throw ContractViolation("doubling_grid: need 0 < lo <= hi");
    std::vector<std::size_t> grid;
    for (std::size_t v = lo; v <= hi; v *= 2) grid.push_back(v);
    return grid;
}

namespace {

std::string number_tag(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

}  // namespace

Recipe memory_size_sweep(const RunConfig& base, const std::vector<std::size_t>& sizes) {
    if (sizes.empty()) throw ContractViolation("memory_size_sweep: empty size grid");
    Recipe r{"memory-size-sweep", {}};
    for (std::size_t dh : sizes) {
        for (MemoryKind kind : {MemoryKind::ReluFfn, MemoryKind::SoftmaxMemory, MemoryKind::SoftmaxMemoryLn}) {
            Job job;
            job.name = to_string(kind) + "-dh" + std::to_string(dh);
            job.params = Json{{"d_h", dh}, {"memory", to_string(kind)}};
            job.run = base;
            job.run.model.d_h = dh;
            job.run.model.memory_kind = kind;
            r.jobs.push_back(std::move(job));
        }
    }
    return r;
}

Recipe length_sweep(const RunConfig& base, const std::vector<std::size_t>& lengths,
                    const std::vector<std::string>& variants) {
    if (lengths.empty() || variants.empty()) throw ContractViolation("length_sweep: empty grid");
    Recipe r{"length-sweep", {}};
    for (std::size_t len : lengths) {
        for (const auto& v : variants) {
            Job job;
            job.name = v + "-L" + std::to_string(len);
            job.params = Json{{"length", len}, {"variant", v}};
            job.run = base;
            job.run.model = apply_variant(base.model, v);
            job.run.model.max_len = std::max(job.run.model.max_len, len);
            job.run.task.length_limit = len;
            r.jobs.push_back(std::move(job));
        }
    }
    return r;
}

Recipe ablation_suite(const RunConfig& base) {
    Recipe r{"ablation-suite", {}};
    for (const char* v : {"reluformer", "no-scale", "no-reg"}) {
        Job job;
        job.name = v;
        job.params = Json{{"variant", v}};
        job.run = base;
        job.run.model = apply_variant(base.model, v);
        r.jobs.push_back(std::move(job));
    }
    return r;
}

Recipe gamma_lambda_sweep(const RunConfig& base, const std::vector<double>& gammas, const std::vector<double>& lambdas) {
    if (gammas.empty() || lambdas.empty()) throw ContractViolation("gamma_lambda_sweep: empty grid");
    Recipe r{"gamma-lambda-sweep", {}};
    for (double g : gammas) {
        for (double l : lambdas) {
            Job job;
            job.name = "gamma" + number_tag(g) + "-lambda" + number_tag(l);
            job.params = Json{{"gamma", g}, {"lambda", l}};
            job.run = base;
            job.run.model = reluformer_variant(base.model);
            job.run.model.attention.gamma = g;
            job.run.model.reg.loss_weight = l;
            r.jobs.push_back(std::move(job));
        }
    }
    return r;
}

Recipe recipe_from_json(const Json& doc) {
    require_known_keys(doc, {"recipe", "base", "sizes", "lengths", "variants", "gammas", "lambdas"}, "recipe");
    if (!doc.contains("recipe")) throw ContractViolation("recipe: missing 'recipe' name");
    const auto name = doc.at("recipe").get<std::string>();
    RunConfig base;
    if (doc.contains("base")) from_json(doc.at("base"), base);

    auto grid_keys_allowed = [&](std::initializer_list<const char*> keys) {
        for (const char* k : {"sizes", "lengths", "variants", "gammas", "lambdas"}) {
            const bool ok = std::find_if(keys.begin(), keys.end(), [&](const char* a) { return std::string(a) == k; }) !=
                            keys.end();
            if (doc.contains(k) && !ok) throw ContractViolation("recipe " + name + ": key '" + k + "' does not apply");
        }
    };

    if (name == "memory-size-sweep") {
        grid_keys_allowed({"sizes"});
        std::vector<std::size_t> sizes = doubling_grid(32, 4096);
        read_key(doc, "sizes", sizes);
        return memory_size_sweep(base, sizes);
    }
    if (name == "length-sweep") {
        grid_keys_allowed({"lengths", "variants"});
        std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048};
        std::vector<std::string> variants{"vanilla", "reluformer"};
        read_key(doc, "lengths", lengths);
        read_key(doc, "variants", variants);
        return length_sweep(base, lengths, variants);
    }
    if (name == "ablation-suite") {
        grid_keys_allowed({});
        return ablation_suite(base);
    }
    if (name == "gamma-lambda-sweep") {
        grid_keys_allowed({"gammas", "lambdas"});
        std::vector<double> gammas{0.5, 1.0, 2.0}, lambdas{0.1, 1.0};
        read_key(doc, "gammas", gammas);
        read_key(doc, "lambdas", lambdas);
        return gamma_lambda_sweep(base, gammas, lambdas);
    }
    throw ContractViolation("unknown recipe '" + name + "'");
}

Json to_json(const JobResult& r) {
    auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
    return Json{{"name", r.name},
                {"params", r.params},
                {"diverged", r.diverged},
                {"steps_run", r.steps_run},
                {"initial_loss", num(r.initial_loss)},
                {"final_loss", num(r.final_loss)},
                {"final_accuracy", num(r.final_accuracy)},
                {"mean_entropy", num(r.mean_entropy)},
                {"zero_fraction", num(r.zero_fraction)},
                {"variance_ratio", num(r.variance_ratio)},
                {"anisotropy", num(r.anisotropy)},
                {"wall_time", r.wall_time}};
}

JobResult run_job(const Job& job, const std::filesystem::path& dir) {
    const RunConfig& run = job.run;
    validate(run.model);
    validate(run.task);
    if (run.task.length_limit > run.model.max_len) throw ContractViolation(job.name + ": length_limit exceeds max_len");
    if (run.task.vocab > run.model.vocab) throw ContractViolation(job.name + ": task vocab exceeds model vocab");

    std::ofstream metrics;
    std::unique_ptr<CsvRecordSink> sink;
    if (!dir.empty()) {
        std::filesystem::create_directories(dir);
        metrics.open(dir / "metrics.csv");
        sink = std::make_unique<CsvRecordSink>(metrics);
    }

    Model model = build(run.model);
    const std::vector<Example> data = generate(run.task);
    const std::vector<Example> held = eval_set(run.task, run.train.eval_examples);
    const TrainResult tr = train(model, data, held, run.train, sink.get());

    JobResult r;
    r.name = job.name;
    r.params = job.params;
    r.diverged = tr.divergence.has_value();
    r.divergence = tr.divergence;
    r.steps_run = tr.steps_run;
    r.initial_loss = tr.initial_loss;
    r.final_loss = tr.final_loss;
    r.final_accuracy = tr.final_accuracy;
    r.wall_time = tr.wall_time;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.mean_entropy = r.zero_fraction = r.variance_ratio = r.anisotropy = nan;
    if (!r.diverged) {
        const std::span<const Example> slice(held.data(), std::min<std::size_t>(held.size(), 8));
        const EntropyReport er = entropy_report(model, slice, job.name);
        r.mean_entropy = er.overall.mean_entropy;
        r.zero_fraction = er.overall.zero_fraction;
        const std::vector<MemoryStats> ms = memory_report(model, slice);
        double vr = 0.0, an = 0.0;
        for (const auto& m : ms) {
            vr += m.variance_ratio;
            an += m.anisotropy;
        }
        r.variance_ratio = vr / static_cast<double>(ms.size());
        r.anisotropy = an / static_cast<double>(ms.size());
    }

    if (!dir.empty()) {
        save_checkpoint(tr.checkpoint, (dir / "checkpoint.json").string());
        Json summary = to_json(r);
        summary["config"] = run;
        if (tr.divergence) {
            summary["divergence"] = Json{{"step", tr.divergence->step},
                                         {"loss", std::isfinite(tr.divergence->loss) ? Json(tr.divergence->loss)
                                                                                     : Json(nullptr)},
                                         {"initial_loss", tr.divergence->initial_loss},
                                         {"reason", tr.divergence->reason}};
        }
        std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
    }
    return r;
}

std::vector<JobResult> run_recipe(const Recipe& recipe, const std::filesystem::path& dir, std::size_t parallel) {
    if (recipe.jobs.empty()) throw ContractViolation("run_recipe: recipe has no jobs");
    std::vector<JobResult> results(recipe.jobs.size());
    std::vector<std::exception_ptr> errors(recipe.jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < recipe.jobs.size(); i = next++) {
            try {
                const auto& job = recipe.jobs[i];
                results[i] = run_job(job, dir.empty() ? std::filesystem::path{} : dir / job.name);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(parallel, 1, recipe.jobs.size());
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    if (!dir.empty()) {
        std::filesystem::create_directories(dir);
        std::ofstream out(dir / (recipe.name + ".csv"));
        write_sweep_csv(out, recipe.name, results);
    }
    return results;
}

void write_sweep_csv(std::ostream& out, const std::string& recipe, const std::vector<JobResult>& results) {
    std::vector<std::string> keys;
    if (!results.empty()) {
        for (const auto& item : results.front().params.items()) keys.push_back(item.key());
    }
    out << "recipe,job";
    for (const auto& k : keys) out << ',' << k;
    out << ",diverged,steps_run,initial_loss,final_loss,final_accuracy,mean_entropy,zero_fraction,variance_ratio,"
           "anisotropy\n";
    out.precision(17);
    for (const auto& r : results) {
        out << recipe << ',' << r.name;
        for (const auto& k : keys) {
            const Json& v = r.params.at(k);
            if (v.is_string()) {
                out << ',' << v.get<std::string>();
            } else {
                out << ',' << v.dump();
            }
        }
        out << ',' << (r.diverged ? 1 : 0) << ',' << r.steps_run << ',' << r.initial_loss << ',' << r.final_loss << ','
            << r.final_accuracy << ',' << r.mean_entropy << ',' << r.zero_fraction << ',' << r.variance_ratio << ','
            << r.anisotropy << '\n';
    }
}

}  // namespace relulab
