#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "relulab/model.hpp"
#include "relulab/optim.hpp"
#include "relulab/tasks.hpp"

namespace relulab {

struct TrainOptions {
    std::size_t steps = 1000;
    std::size_t batch_tokens = 2048;  // target tokens (source + target) per update
    LrSchedule schedule;
    AdamConfig adam;
    std::size_t log_every = 10;
    std::size_t eval_examples = 64;
    // Divergence: non-finite loss or loss above this multiple of the first step's.
    double divergence_factor = 10.0;
    std::uint64_t seed = 1;  // data order and dropout
};

void validate(const TrainOptions& opts);

struct StepRecord {
    std::uint64_t step = 0;
    double task_loss = 0.0;
    double reg_loss = 0.0;       // unweighted
    double token_accuracy = 0.0;  // teacher-forced, on the step's batch
    double mean_entropy = 0.0;    // normalized attention entropy over the batch
    double wall_time = 0.0;       // seconds since the start of training
};

class RecordSink {
public:
    virtual ~RecordSink() = default;
    virtual void append(const StepRecord& record) = 0;
};

/// Writes step,task_loss,reg_loss,token_accuracy,mean_entropy rows.
/// Wall time is left out so the file is reproducible bit for bit.
class CsvRecordSink : public RecordSink {
public:
    explicit CsvRecordSink(std::ostream& out);
    void append(const StepRecord& record) override;

private:
    std::ostream& out_;
};

class VectorRecordSink : public RecordSink {
public:
    void append(const StepRecord& record) override { records.push_back(record); }
    std::vector<StepRecord> records;
};

struct DivergenceReport {
    std::uint64_t step = 0;
    double loss = 0.0;
    double initial_loss = 0.0;
    std::string reason;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::optional<DivergenceReport> divergence;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_accuracy = 0.0;  // teacher-forced, on the held-out set
    std::uint64_t steps_run = 0;
    double wall_time = 0.0;
};

/// Teacher-forced token accuracy over `examples`.
double evaluate_accuracy(const Model& model, std::span<const Example> examples);

/// Held-out set for `task`: same distribution, independent seed stream.
std::vector<Example> eval_set(const TaskSpec& task, std::size_t count);

/// Trains `model` in place on `data`; evaluates on `held_out`.
///
/// Each step gathers examples in a seeded shuffled order until
/// `batch_tokens` is reached, accumulates one backward pass per example, and
/// applies one Adam update. Divergence stops the run and is reported, not thrown.
TrainResult train(Model& model, std::span<const Example> data, std::span<const Example> held_out,
                  const TrainOptions& opts, RecordSink* sink = nullptr);

/// Builds the model from `model_cfg`, generates the task data, and trains.
TrainResult train(const ModelConfig& model_cfg, const TaskSpec& task, const TrainOptions& opts,
                  RecordSink* sink = nullptr);

}  // namespace relulab
