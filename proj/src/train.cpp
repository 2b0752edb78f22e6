#include "relulab/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "relulab/regularizer.hpp"

namespace relulab {

void validate(const TrainOptions& opts) {
    if (opts.batch_tokens == 0) throw ContractViolation("train: batch_tokens must be positive");
    if (opts.log_every == 0) throw ContractViolation("train: log_every must be positive");
    if (opts.eval_examples == 0) throw ContractViolation("train: eval_examples must be positive");
    if (!(opts.divergence_factor > 1.0)) throw ContractViolation("train: divergence_factor must exceed 1");
    if (!(opts.schedule.base_lr > 0.0)) throw ContractViolation("train: base_lr must be positive");
    if (opts.schedule.warmup == 0) throw ContractViolation("train: warmup must be positive");
}

CsvRecordSink::CsvRecordSink(std::ostream& out) : out_(out) {
    out_ << "step,task_loss,reg_loss,token_accuracy,mean_entropy\n";
    out_.precision(17);
}

void CsvRecordSink::append(const StepRecord& r) {
    out_ << r.step << ',' << r.task_loss << ',' << r.reg_loss << ',' << r.token_accuracy << ',' << r.mean_entropy
         << '\n';
    out_.flush();
}

double evaluate_accuracy(const Model& model, std::span<const Example> examples) {
    if (examples.empty()) throw ContractViolation("evaluate_accuracy: no examples");
    NoGradGuard guard;
    std::size_t correct = 0, total = 0;
    for (const auto& ex : examples) {
        ForwardResult r = forward(model, ex.src, ex.tgt);
        correct += correct_tokens(r.logits, ex.tgt);
        total += ex.tgt.size();
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<Example> eval_set(const TaskSpec& task, std::size_t count) {
    TaskSpec held = task;
    held.examples = count;
    held.seed = Rng(task.seed).fork(0x5eed).next_u64();
    return generate(held);
}

namespace {

double mean_normalized_entropy(const std::vector<SiteScores>& sites) {
    double total = 0.0;
    std::size_t rows = 0;
    for (const auto& site : sites) {
        ScoreDistribution s{site.scores.weights.detach(), site.scores.effective_lengths, site.scores.kind};
        Tensor h = entropy(s, true);
        for (double v : h.values()) total += v;
        rows += h.numel();
    }
    return rows ? total / static_cast<double>(rows) : 0.0;
}

class Shuffler {
public:
    Shuffler(std::size_t n, Rng rng) : order_(n), rng_(std::move(rng)) { reshuffle(); }

    std::size_t next() {
        if (pos_ == order_.size()) reshuffle();
        return order_[pos_++];
    }

private:
    void reshuffle() {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
        pos_ = 0;
    }

    std::vector<std::size_t> order_;
    Rng rng_;
    std::size_t pos_ = 0;
};

}  // namespace

TrainResult train(Model& model, std::span<const Example> data, std::span<const Example> held_out,
                  const TrainOptions& opts, RecordSink* sink) {
    validate(opts);
    if (data.empty()) throw ContractViolation("train: empty dataset");
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

    const Rng root(opts.seed);
    Shuffler order(data.size(), root.fork(1));
    Rng dropout_rng = root.fork(2);
    ForwardOptions fopts;
    fopts.dropout_rng = &dropout_rng;

    const double lambda = model.config().reg.loss_weight;
    std::vector<Tensor> params = model.parameters();
    AdamState state = make_adam_state(params);
    TrainResult result;

    for (std::uint64_t step = 1; step <= opts.steps; ++step) {
        std::vector<std::size_t> batch;
        std::size_t tokens = 0, target_tokens = 0;
        while (tokens < opts.batch_tokens) {
            const std::size_t i = order.next();
            batch.push_back(i);
            tokens += data[i].src.size() + data[i].tgt.size();
            target_tokens += data[i].tgt.size();
        }

        const bool log_step = step == 1 || step % opts.log_every == 0 || step == opts.steps;
        model.zero_grad();
        double task_loss = 0.0, reg_value = 0.0, entropy_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t i : batch) {
            const Example& ex = data[i];
            ForwardResult r = forward(model, ex.src, ex.tgt, fopts);
            const Tensor ce = cross_entropy(r.logits, ex.tgt);
            const double share = static_cast<double>(ex.tgt.size()) / static_cast<double>(target_tokens);
            Tensor objective = scale(ce, share);
            if (lambda != 0.0) objective = add(objective, scale(r.reg, lambda / static_cast<double>(batch.size())));
            objective.backward();
            task_loss += ce.item() * share;
            reg_value += r.reg.item() / static_cast<double>(batch.size());
            correct += correct_tokens(r.logits, ex.tgt);
            if (log_step) entropy_sum += mean_normalized_entropy(r.diagnostics);
        }
        const double total_loss = task_loss + lambda * reg_value;
        if (step == 1) result.initial_loss = total_loss;
        result.final_loss = total_loss;
        result.steps_run = step;

        if (log_step && sink) {
            StepRecord rec;
            rec.step = step;
            rec.task_loss = task_loss;
            rec.reg_loss = reg_value;
            rec.token_accuracy = static_cast<double>(correct) / static_cast<double>(target_tokens);
            rec.mean_entropy = entropy_sum / static_cast<double>(batch.size());
            rec.wall_time = elapsed();
            sink->append(rec);
        }

        if (!std::isfinite(total_loss)) {
            result.divergence = DivergenceReport{step, total_loss, result.initial_loss, "non-finite loss"};
            break;
        }
        if (total_loss > opts.divergence_factor * result.initial_loss) {
            result.divergence = DivergenceReport{step, total_loss, result.initial_loss,
                                                 "loss exceeded divergence_factor x initial loss"};
            break;
        }
        adam_step(params, state, opts.schedule.at(step), opts.adam);
    }
    model.zero_grad();

    if (!result.divergence && !held_out.empty()) result.final_accuracy = evaluate_accuracy(model, held_out);
    result.checkpoint = make_checkpoint(model, state, state.step);
    result.wall_time = elapsed();
    return result;
}

TrainResult train(const ModelConfig& model_cfg, const TaskSpec& task, const TrainOptions& opts, RecordSink* sink) {
    validate(model_cfg);
    validate(task);
    if (task.length_limit > model_cfg.max_len) {
        throw ContractViolation("train: task length_limit exceeds model max_len");
    }
    if (task.vocab > model_cfg.vocab) throw ContractViolation("train: task vocab exceeds model vocab");
    Model model = build(model_cfg);
    const std::vector<Example> data = generate(task);
    const std::vector<Example> held = eval_set(task, opts.eval_examples);
    return train(model, data, held, opts, sink);
}

}  // namespace relulab
