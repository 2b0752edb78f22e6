#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "relulab/config.hpp"

namespace relulab {

/// Named model variants: "vanilla", "reluformer", "no-scale" (ReLUFormer
/// without the length scale factor), "no-reg" (ReLUFormer without the
/// regularizer).
ModelConfig apply_variant(ModelConfig cfg, const std::string& variant);

struct Job {
    std::string name;  // unique within its recipe; used as the output subdirectory
    Json params;       // the swept values, flat object
    RunConfig run;
};

struct Recipe {
    std::string name;
    std::vector<Job> jobs;
};

/// lo, 2lo, 4lo, ... up to hi inclusive.
std::vector<std::size_t> doubling_grid(std::size_t lo, std::size_t hi);

/// Every size crossed with relu-ffn, softmax-memory, softmax-memory-ln.
Recipe memory_size_sweep(const RunConfig& base, const std::vector<std::size_t>& sizes = doubling_grid(32, 4096));
/// Every length crossed with every variant; max_len grows to fit.
Recipe length_sweep(const RunConfig& base, const std::vector<std::size_t>& lengths = {128, 256, 512, 1024, 2048},
                    const std::vector<std::string>& variants = {"vanilla", "reluformer"});
/// ReLUFormer, without scale factor, without regularizer.
Recipe ablation_suite(const RunConfig& base);
/// ReLUFormer over gamma x lambda.
Recipe gamma_lambda_sweep(const RunConfig& base, const std::vector<double>& gammas = {0.5, 1.0, 2.0},
                          const std::vector<double>& lambdas = {0.1, 1.0});

/// Recipe document: {recipe: <name>, base: <run config>, and optional grid
/// keys sizes / lengths / variants / gammas / lambdas}.
Recipe recipe_from_json(const Json& doc);

struct JobResult {
    std::string name;
    Json params;
    bool diverged = false;
    std::optional<DivergenceReport> divergence;
    std::uint64_t steps_run = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_accuracy = 0.0;
    double mean_entropy = 0.0;    // NaN when diverged
    double zero_fraction = 0.0;   // NaN when diverged
    double variance_ratio = 0.0;  // mean over memory blocks; NaN when diverged
    double anisotropy = 0.0;      // mean over memory blocks; NaN when diverged
    double wall_time = 0.0;
};

Json to_json(const JobResult& r);

/// Trains and analyzes one job. With a non-empty `dir`, writes metrics.csv,
/// checkpoint.json and summary.json there.
JobResult run_job(const Job& job, const std::filesystem::path& dir = {});

/// Runs every job on up to `parallel` threads, writes <dir>/<recipe>.csv,
/// and returns results in job order.
std::vector<JobResult> run_recipe(const Recipe& recipe, const std::filesystem::path& dir, std::size_t parallel = 1);

/// recipe,job,<param columns>,diverged,steps_run,initial_loss,final_loss,
/// final_accuracy,mean_entropy,zero_fraction,variance_ratio,anisotropy
void write_sweep_csv(std::ostream& out, const std::string& recipe, const std::vector<JobResult>& results);

}  // namespace relulab
