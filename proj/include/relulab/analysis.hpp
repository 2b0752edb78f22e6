#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "relulab/attention.hpp"
#include "relulab/model.hpp"
#include "relulab/rng.hpp"
#include "relulab/tensor.hpp"

namespace relulab {

struct Example;

enum class ScoreSource { FfnMemory, Attention };
std::string to_string(ScoreSource source);

/// Mean top-p% mass curve over all rows and heads of one score distribution.
struct TopPReport {
    std::vector<double> p_grid;  // percentages in (0, 100]
    std::vector<double> mass;    // in [0, 1], nondecreasing in p
    ScoreSource source = ScoreSource::Attention;
    std::string model_tag;
    std::size_t rows = 0;        // rows that entered the average
};

/// For every visible row: normalize ReLU rows by their sum (softmax rows are
/// used as-is), sort descending, and sum the top ceil(p/100 * n_i) entries.
/// All-zero ReLU rows carry no distribution and are skipped.
TopPReport top_p_mass(const ScoreDistribution& s, std::span<const double> p_grid,
                      ScoreSource source = ScoreSource::Attention, std::string model_tag = {});

/// Wraps memory slot scores [n x d_h] as a one-head distribution over d_h slots.
ScoreDistribution memory_score_distribution(const Tensor& slot_scores, MemoryKind kind);

/// Mean pairwise cosine similarity between the rows of `values` [d_h x d],
/// over ordered pairs i != j.
double anisotropy(const Tensor& values);

struct EntropyStats {
    std::string site;
    double mean_entropy = 0.0;
    double median_entropy = 0.0;
    double zero_fraction = 0.0;  // exactly-zero weights among visible entries
    std::size_t rows = 0;
};

/// Normalized-entropy statistics of a set of distributions, pooled over heads and rows.
EntropyStats entropy_stats(std::string site, std::span<const ScoreDistribution> distributions);

struct EntropyReport {
    std::string model_tag;
    std::vector<EntropyStats> sites;  // one per attention site, model order
    EntropyStats overall;             // pooled over every site
};

/// Runs teacher-forced passes over `slice` and summarizes every attention site.
EntropyReport entropy_report(const Model& model, std::span<const Example> slice, std::string model_tag = {});

struct MemoryStats {
    std::string site;
    double variance_ratio = 0.0;
    double anisotropy = 0.0;
};

/// Variance ratio (block output vs residual input, pooled over the slice)
/// and value-slot anisotropy of every feed-forward/memory block.
std::vector<MemoryStats> memory_report(const Model& model, std::span<const Example> slice);

/// Per-site and mean top-p curves from teacher-forced passes over `slice`.
struct SiteTopP {
    std::string site;
    TopPReport report;
};
std::vector<SiteTopP> attention_top_p(const Model& model, std::span<const Example> slice,
                                      std::span<const double> p_grid, std::string model_tag = {});
std::vector<SiteTopP> memory_top_p(const Model& model, std::span<const Example> slice,
                                   std::span<const double> p_grid, std::string model_tag = {});
/// Average of several curves on the same grid, tagged with site "mean".
SiteTopP mean_top_p(std::span<const SiteTopP> curves);

struct Theorem1Row {
    std::size_t n = 0;
    std::size_t trials = 0;
    double empirical_var = 0.0;
    double predicted_var = 0.0;
    double rel_err = 0.0;
};

/// Monte-Carlo check of Var(sum_i ReLU(x_i) v_i) = n / 2 for each n.
std::vector<Theorem1Row> theorem1_report(std::span<const std::size_t> n_list, std::size_t trials, Rng& rng);

/// Variance of y_r = sum_j w_rj v_rj over `rows` rows, where w comes from
/// attention_weights on N(0, 1) logits of length n and v ~ N(0, 1) is drawn
/// independently of the logits.
double weighted_value_variance_probe(std::size_t n, std::size_t rows, const AttentionConfig& cfg, Rng& rng);

/// Variance of the attention context (heads concatenated, before W_O) for
/// X ~ N(0, 1) [n x d] under freshly initialized projections, pooled over
/// `draws` independent initializations. Keys and values share their input,
/// so ReLU weights correlate with values and add roughly n / (2d) on top of
/// the independent-value variance.
double context_variance_probe(std::size_t n, std::size_t d, const AttentionConfig& cfg, std::size_t draws, Rng& rng);

// CSV writers (header row, '.' decimal separator).
void write_top_p_csv(std::ostream& out, std::span<const SiteTopP> curves);
void write_entropy_csv(std::ostream& out, const EntropyReport& report);
void write_memory_csv(std::ostream& out, const std::string& model_tag, std::span<const MemoryStats> stats);
void write_theorem1_csv(std::ostream& out, std::span<const Theorem1Row> rows);

}  // namespace relulab
