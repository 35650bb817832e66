#include "stp/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "stp/geometry.hpp"
#include "stp/rng.hpp"
#include "stp/theory.hpp"

namespace stp {

namespace {

// Stream tags so the init, data-order, triple, and projector RNG streams are
// independent functions of the run seed.
constexpr uint64_t kOrderStream = 0x04DE4ull;
constexpr uint64_t kTripleStream = 0x791Eull;
constexpr uint64_t kProjectorStream = 0x9407ull;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, const OptimizerSpec& spec)
      : params_(std::move(params)), spec_(spec) {
    for (const Tensor& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grads() {
    for (Tensor& p : params_) p.zero_grad();
  }

  void scale_grads(double factor) {
    for (Tensor& p : params_)
      if (p.has_grad())
        for (double& g : p.grad()) g *= factor;
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(spec_.beta1, t_);
    double bc2 = 1.0 - std::pow(spec_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const double* g = p.has_grad() ? p.grad().data() : nullptr;
      for (size_t j = 0; j < p.numel(); ++j) {
        double gj = g ? g[j] : 0.0;
        m_[i][j] = spec_.beta1 * m_[i][j] + (1.0 - spec_.beta1) * gj;
        v_[i][j] = spec_.beta2 * v_[i][j] + (1.0 - spec_.beta2) * gj * gj;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        p.values()[j] -= lr * mhat / (std::sqrt(vhat) + spec_.eps);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  OptimizerSpec spec_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

IndexTriple make_triple(const AuxLossSpec& spec, const ExamplePair& ex, int len, Rng& rng) {
  TripleStrategy strategy = spec.strategy();
  std::optional<SpanMarks> marks;
  if (strategy == TripleStrategy::kTwoView) marks = ex.marks();
  IndexTriple triple = sample_triple(rng, len, strategy, marks);
  // Mask variants recover the state of the full sequence: anchor t at the end.
  if (spec.needs_mask_pass()) triple.t = len - 1;
  return triple;
}

std::vector<int> masked_sequence(const std::vector<int>& seq, const IndexTriple& triple,
                                 int mask_token) {
  std::vector<int> masked = seq;
  for (int i = triple.s; i <= triple.r; ++i) masked[i] = mask_token;
  return masked;
}

struct SeqLoss {
  double ntp = 0.0;
  double aux = 0.0;
};

// One tape per sequence; gradients accumulate on the shared parameter
// buffers and are reduced by the caller.
SeqLoss sequence_loss(const ModelParams& params, const AuxLossSpec& spec,
                      const ExamplePair& ex, double lambda_now, Rng& triple_rng) {
  std::vector<int> seq = ex.full_sequence();
  int len = static_cast<int>(seq.size());
  std::vector<int> targets(seq.begin() + 1, seq.end());
  std::vector<uint8_t> mask = ntp_target_mask(ex);

  Tape tape;
  ForwardResult fr = forward(params, seq);
  Tensor ntp = ntp_loss(slice_rows(fr.logits, 0, len - 1), targets, mask);

  SeqLoss out;
  out.ntp = ntp.item();
  Tensor combined = ntp;

  if (len >= 3) {
    IndexTriple triple = make_triple(spec, ex, len, triple_rng);
    if (spec.variant == AuxVariant::kNone || lambda_now == 0.0) {
      // The auxiliary value is still measured (and the triple still drawn) so
      // metrics match an otherwise-identical run with lambda > 0; it just
      // contributes nothing to the graph.
      NoGradGuard no_grad;
      if (spec.variant == AuxVariant::kNone) {
        out.aux = stp_loss(fr.trajectory.states, triple).item();
      } else if (spec.needs_mask_pass()) {
        Tensor masked_traj =
            forward(params, masked_sequence(seq, triple, spec.mask_token_id)).trajectory.states;
        out.aux = aux_loss(spec, fr.trajectory.states, triple, &masked_traj).item();
      } else {
        out.aux = aux_loss(spec, fr.trajectory.states, triple).item();
      }
    } else {
      Tensor aux;
      if (spec.needs_mask_pass()) {
        Tensor masked_traj =
            forward(params, masked_sequence(seq, triple, spec.mask_token_id)).trajectory.states;
        aux = aux_loss(spec, fr.trajectory.states, triple, &masked_traj);
      } else {
        aux = aux_loss(spec, fr.trajectory.states, triple);
      }
      out.aux = aux.item();
      combined = combined_loss(ntp, aux, lambda_now);
    }
  }

  if (!std::isfinite(combined.item()))
    throw std::runtime_error("train: non-finite loss");
  tape.backward(combined);
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<StepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("train: cannot open '" + path + "' for writing");
  out << "step,epoch,loss_ntp,loss_stp,lambda,lr,seed\n";
  for (const StepRow& r : rows)
    out << r.step << "," << r.epoch << "," << fmt_double(r.loss_ntp) << ","
        << fmt_double(r.loss_stp) << "," << fmt_double(r.lambda) << "," << fmt_double(r.lr)
        << "," << r.seed << "\n";
  if (!out) throw std::runtime_error("train: write failed for '" + path + "'");
}

// Final-quarter trend: split the last quarter of rows into 4 consecutive
// chunks and compare chunk means, which damps batch-composition noise.
void final_quarter_stats(const std::vector<StepRow>& rows, RunRecord& record) {
  size_t n = rows.size();
  if (n < 8) return;
  size_t start = n - n / 4;
  std::vector<double> ntp_chunks, stp_chunks;
  size_t quarter = n - start;
  for (int c = 0; c < 4; ++c) {
    size_t lo = start + quarter * c / 4;
    size_t hi = start + quarter * (c + 1) / 4;
    if (lo >= hi) continue;
    double sn = 0.0, ss = 0.0;
    for (size_t i = lo; i < hi; ++i) {
      sn += rows[i].loss_ntp;
      ss += rows[i].loss_stp;
    }
    ntp_chunks.push_back(sn / (hi - lo));
    stp_chunks.push_back(ss / (hi - lo));
  }
  if (ntp_chunks.size() < 2) return;
  double lo = ntp_chunks[0], hi = ntp_chunks[0];
  for (double v : ntp_chunks) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  record.p1_ntp_range = hi - lo;
  record.p1_stp_drop = stp_chunks.front() - stp_chunks.back();
}

void run_jobs(std::vector<std::function<void()>> jobs) {
  int threads = std::min<int>(run_parallelism(), static_cast<int>(jobs.size()));
  if (threads <= 1) {
    for (auto& job : jobs) job();
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs.size());
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void write_aggregate_csv(const std::string& path, const std::vector<ExperimentRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("experiment: cannot open '" + path + "' for writing");
  out << "experiment,variant,lambda,fraction,seed,accuracy,acc_star,acc_starstar,"
         "final_ntp,final_stp\n";
  for (const ExperimentRow& r : rows)
    out << r.experiment << "," << r.variant << "," << fmt_g(r.lambda) << ","
        << fmt_g(1.0 / r.fraction_n) << "," << r.seed << "," << fmt_double(r.accuracy) << ","
        << fmt_double(r.acc_star) << "," << fmt_double(r.acc_starstar) << ","
        << fmt_double(r.final_ntp) << "," << fmt_double(r.final_stp) << "\n";
  if (!out) throw std::runtime_error("experiment: write failed for '" + path + "'");
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (task.name != "pattern" && task.name != "copy")
    throw std::invalid_argument("config: unknown task '" + task.name + "'");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (!std::isfinite(lambda) || lambda < 0.0)
    throw std::invalid_argument("config: lambda must be finite and >= 0");
  if (adam.lr <= 0.0) throw std::invalid_argument("config: lr must be > 0");
}

std::string TrainConfig::run_tag() const {
  std::string tag = task.name;
  tag += "_";
  tag += variant_name(variant);
  tag += "_l" + fmt_g(lambda);
  tag += "_s" + std::to_string(seed);
  tag += "_n" + std::to_string(fraction_n);
  if (half_compute) tag += "_hc";
  return tag;
}

DatasetSplit build_dataset(const TaskSpec& task) {
  if (task.name == "pattern")
    return generate_pattern_task(task.data_seed, task.n_train, task.n_test, task.suffix_ratio);
  if (task.name == "copy")
    return generate_copy_task(task.data_seed, task.n_train, task.payload_len);
  throw std::invalid_argument("config: unknown task '" + task.name + "'");
}

std::vector<uint64_t> default_seeds() { return {82, 23, 37, 84, 4}; }

int run_parallelism() {
  const char* env = std::getenv("STP_THREADS");
  if (env == nullptr) return 1;
  int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

TrainOutcome train_run(const TrainConfig& config) {
  config.validate();
  auto t_start = std::chrono::steady_clock::now();

  DatasetSplit dataset = build_dataset(config.task);
  SubsetResult subset =
      subset_fraction(dataset, config.fraction_n, config.seed, config.half_compute);
  const std::vector<ExamplePair>& train_set = subset.split.train;
  int train_size = static_cast<int>(train_set.size());
  int batch = std::min(config.batch_size, train_size);
  int steps_per_epoch = (train_size + batch - 1) / batch;

  int epochs_eff =
      std::max(1, static_cast<int>(std::llround(config.epochs * subset.epoch_multiplier)));
  long base_steps = static_cast<long>(config.epochs) *
                    ((static_cast<int>(dataset.train.size()) + batch - 1) / batch);
  long total_steps = static_cast<long>(epochs_eff) * steps_per_epoch;
  if (total_steps > 64 * base_steps) {
    std::fprintf(stderr, "warning: step budget %ld exceeds 64x base (%ld); capping\n",
                 total_steps, 64 * base_steps);
    epochs_eff = std::max(1, static_cast<int>((64 * base_steps) / steps_per_epoch));
    total_steps = static_cast<long>(epochs_eff) * steps_per_epoch;
  }

  ModelParams params = init_params(config.model, config.seed);
  AuxLossSpec aux;
  aux.variant = config.variant;
  aux.lambda = config.lambda;
  aux.warmup_steps = config.warmup_steps;
  if (aux.needs_projector()) {
    Rng proj_rng(mix_seed(config.seed, kProjectorStream));
    aux.projector = Tensor::zeros({config.model.d_model, config.model.d_model}, true);
    for (double& v : aux.projector.values()) v = 0.02 * proj_rng.normal();
  }
  aux.validate(config.model.d_model);

  std::vector<Tensor> trainables = params.all();
  if (aux.needs_projector()) trainables.push_back(aux.projector);
  Adam optimizer(trainables, config.adam);
  double lr = config.adam.lr * subset.lr_scale;

  RunRecord record;
  record.rows.reserve(total_steps);
  std::vector<int> order(train_size);
  for (int i = 0; i < train_size; ++i) order[i] = i;

  uint64_t sequence_counter = 0;
  int global_step = 0;
  for (int epoch = 0; epoch < epochs_eff; ++epoch) {
    Rng order_rng(mix_seed(config.seed, kOrderStream, static_cast<uint64_t>(epoch)));
    for (int i = train_size - 1; i > 0; --i)
      std::swap(order[i], order[order_rng.below_int(i + 1)]);

    for (int start = 0; start < train_size; start += batch) {
      int count = std::min(batch, train_size - start);
      double lambda_now = lambda_at(aux, global_step, static_cast<int>(total_steps));
      optimizer.zero_grads();
      double ntp_sum = 0.0, aux_sum = 0.0;
      for (int b = 0; b < count; ++b) {
        const ExamplePair& ex = train_set[order[start + b]];
        Rng triple_rng(mix_seed(config.seed, kTripleStream, sequence_counter++));
        SeqLoss loss;
        try {
          loss = sequence_loss(params, aux, ex, lambda_now, triple_rng);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error(std::string(e.what()) + " (step " +
                                   std::to_string(global_step) + ")");
        }
        ntp_sum += loss.ntp;
        aux_sum += loss.aux;
      }
      optimizer.scale_grads(1.0 / count);
      optimizer.step(lr);

      StepRow row;
      row.step = global_step;
      row.epoch = epoch;
      row.loss_ntp = ntp_sum / count;
      row.loss_stp = aux_sum / count;
      row.lambda = lambda_now;
      row.lr = lr;
      row.seed = config.seed;
      record.rows.push_back(row);
      ++global_step;
    }
  }

  EvalResult eval = evaluate_exact_match(params, subset.split.test);
  record.accuracy = eval.accuracy;
  record.acc_star = eval.acc_star;
  record.acc_starstar = eval.acc_starstar;

  int last_epoch = record.rows.empty() ? 0 : record.rows.back().epoch;
  std::vector<double> ln, ls;
  for (const StepRow& r : record.rows)
    if (r.epoch == last_epoch) {
      ln.push_back(r.loss_ntp);
      ls.push_back(r.loss_stp);
    }
  record.final_ntp = mean_of(ln);
  record.final_stp = mean_of(ls);

  final_quarter_stats(record.rows, record);
  record.p1_ntp_plateau = record.p1_ntp_range < config.p1_ntp_range_max;
  record.p1_stp_decreasing = record.p1_stp_drop > config.p1_stp_decrease_min;

  std::filesystem::create_directories(config.out_dir);
  record.metrics_path = config.out_dir + "/" + config.run_tag() + "_metrics.csv";
  record.checkpoint_path = config.out_dir + "/" + config.run_tag() + ".stpc";
  write_metrics_csv(record.metrics_path, record.rows);
  save_checkpoint(params, record.checkpoint_path);

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  TrainOutcome outcome;
  outcome.record = std::move(record);
  outcome.params = std::move(params);
  outcome.aux = std::move(aux);
  return outcome;
}

EvalResult evaluate_exact_match(const ModelParams& params,
                                const std::vector<ExamplePair>& test) {
  EvalResult result;
  int correct = 0, correct_star = 0, correct_starstar = 0;
  for (const ExamplePair& ex : test) {
    std::vector<int> prompt;
    prompt.push_back(kBosToken);
    prompt.insert(prompt.end(), ex.instruction.begin(), ex.instruction.end());
    prompt.insert(prompt.end(), ex.query.begin(), ex.query.end());
    prompt.push_back(kSepToken);

    int budget = std::min<int>(static_cast<int>(ex.answer.size()) + 1,
                               params.config.max_seq_len - static_cast<int>(prompt.size()));
    std::vector<int> generated = greedy_decode(params, prompt, budget);

    std::vector<int> expected = ex.answer;
    expected.push_back(kEosToken);
    bool ok = generated.size() == prompt.size() + expected.size() &&
              std::equal(expected.begin(), expected.end(), generated.begin() + prompt.size());

    ++result.n;
    if (ex.suffix == SuffixClass::kStar) ++result.n_star;
    if (ex.suffix == SuffixClass::kStarStar) ++result.n_starstar;
    if (ok) {
      ++correct;
      if (ex.suffix == SuffixClass::kStar) ++correct_star;
      if (ex.suffix == SuffixClass::kStarStar) ++correct_starstar;
    }
  }
  result.accuracy = result.n ? static_cast<double>(correct) / result.n : 0.0;
  result.acc_star = result.n_star ? static_cast<double>(correct_star) / result.n_star : 0.0;
  result.acc_starstar =
      result.n_starstar ? static_cast<double>(correct_starstar) / result.n_starstar : 0.0;
  return result;
}

SweepResult sweep_lambda(const TrainConfig& base, const std::vector<double>& grid,
                         const std::vector<uint64_t>& seeds) {
  if (grid.empty()) throw std::invalid_argument("sweep_lambda: empty grid");
  if (seeds.empty()) throw std::invalid_argument("sweep_lambda: empty seed list");
  AuxVariant variant = base.variant == AuxVariant::kNone ? AuxVariant::kStp : base.variant;

  SweepResult result;
  result.grid = grid;
  result.rows.resize(grid.size() * seeds.size());
  std::vector<std::function<void()>> jobs;
  for (size_t g = 0; g < grid.size(); ++g) {
    for (size_t s = 0; s < seeds.size(); ++s) {
      jobs.push_back([&, g, s]() {
        TrainConfig config = base;
        config.variant = variant;
        config.lambda = grid[g];
        config.seed = seeds[s];
        TrainOutcome outcome = train_run(config);
        ExperimentRow row;
        row.experiment = "sweep";
        row.variant = variant_name(variant);
        row.lambda = grid[g];
        row.fraction_n = config.fraction_n;
        row.seed = seeds[s];
        row.accuracy = outcome.record.accuracy;
        row.acc_star = outcome.record.acc_star;
        row.acc_starstar = outcome.record.acc_starstar;
        row.final_ntp = outcome.record.final_ntp;
        row.final_stp = outcome.record.final_stp;
        result.rows[g * seeds.size() + s] = row;
      });
    }
  }
  run_jobs(std::move(jobs));

  for (size_t g = 0; g < grid.size(); ++g) {
    std::vector<double> stp_values, acc_values;
    for (size_t s = 0; s < seeds.size(); ++s) {
      stp_values.push_back(result.rows[g * seeds.size() + s].final_stp);
      acc_values.push_back(result.rows[g * seeds.size() + s].accuracy);
    }
    result.mean_final_stp.push_back(mean_of(stp_values));
    result.mean_accuracy.push_back(mean_of(acc_values));
  }

  std::filesystem::create_directories(base.out_dir);
  result.aggregate_path = base.out_dir + "/sweep_aggregate.csv";
  write_aggregate_csv(result.aggregate_path, result.rows);
  return result;
}

DataEfficiencyResult data_efficiency_experiment(const TrainConfig& base,
                                                const std::vector<int>& fractions,
                                                const std::vector<uint64_t>& seeds,
                                                bool half_compute_arm) {
  if (fractions.empty()) throw std::invalid_argument("data_efficiency: empty fraction list");
  if (seeds.empty()) throw std::invalid_argument("data_efficiency: empty seed list");
  AuxVariant stp_variant = base.variant == AuxVariant::kNone ? AuxVariant::kStp : base.variant;
  if (base.lambda <= 0.0)
    throw std::invalid_argument("data_efficiency: base lambda must be > 0 for the STP arm");

  struct Arm {
    AuxVariant variant;
    double lambda;
    bool half;
    std::string label;
  };
  std::vector<Arm> arms = {{AuxVariant::kNone, 0.0, false, "None"},
                           {stp_variant, base.lambda, false, variant_name(stp_variant)}};
  if (half_compute_arm) {
    arms.push_back({AuxVariant::kNone, 0.0, true, "None_half"});
    arms.push_back({stp_variant, base.lambda, true, std::string(variant_name(stp_variant)) + "_half"});
  }

  DataEfficiencyResult result;
  result.rows.resize(fractions.size() * arms.size() * seeds.size());
  std::vector<std::function<void()>> jobs;
  for (size_t f = 0; f < fractions.size(); ++f) {
    for (size_t a = 0; a < arms.size(); ++a) {
      for (size_t s = 0; s < seeds.size(); ++s) {
        size_t slot = (f * arms.size() + a) * seeds.size() + s;
        jobs.push_back([&, f, a, s, slot]() {
          TrainConfig config = base;
          config.fraction_n = fractions[f];
          config.variant = arms[a].variant;
          config.lambda = arms[a].lambda;
          config.half_compute = arms[a].half;
          config.seed = seeds[s];
          TrainOutcome outcome = train_run(config);
          ExperimentRow row;
          row.experiment = "data_eff";
          row.variant = arms[a].label;
          row.lambda = arms[a].lambda;
          row.fraction_n = fractions[f];
          row.seed = seeds[s];
          row.accuracy = outcome.record.accuracy;
          row.acc_star = outcome.record.acc_star;
          row.acc_starstar = outcome.record.acc_starstar;
          row.final_ntp = outcome.record.final_ntp;
          row.final_stp = outcome.record.final_stp;
          result.rows[slot] = row;
        });
      }
    }
  }
  run_jobs(std::move(jobs));

  // Paired one-tailed test, STP arm against the baseline arm, per fraction.
  for (size_t f = 0; f < fractions.size(); ++f) {
    std::vector<double> baseline, treated;
    for (size_t s = 0; s < seeds.size(); ++s) {
      baseline.push_back(result.rows[(f * arms.size() + 0) * seeds.size() + s].accuracy);
      treated.push_back(result.rows[(f * arms.size() + 1) * seeds.size() + s].accuracy);
    }
    PairedTest test;
    test.fraction_n = fractions[f];
    try {
      TTestResult tt = paired_t_test_one_tailed(treated, baseline);
      test.t_stat = tt.t_stat;
      test.p = tt.p;
    } catch (const std::invalid_argument&) {
      test.degenerate = true;
    }
    result.tests.push_back(test);
  }

  std::filesystem::create_directories(base.out_dir);
  result.aggregate_path = base.out_dir + "/data_eff_aggregate.csv";
  write_aggregate_csv(result.aggregate_path, result.rows);
  return result;
}

DiagnoseSummary diagnose(const ModelParams& params, const DatasetSplit& split,
                         const DiagnoseOptions& options) {
  if (options.tau < 2) throw std::invalid_argument("diagnose: tau must be >= 2");
  std::ofstream out(options.out_path);
  if (!out) throw std::runtime_error("diagnose: cannot open '" + options.out_path + "'");
  out << "sequence_id,metric,position,value\n";

  NoGradGuard no_grad;
  DiagnoseSummary summary;
  int count = std::min<int>(options.max_sequences, static_cast<int>(split.test.size()));
  std::vector<std::vector<double>> diff_rows;

  for (int i = 0; i < count; ++i) {
    const ExamplePair& ex = split.test[i];
    std::vector<int> seq = ex.full_sequence();
    ForwardResult fr = forward(params, seq);
    const Tensor& traj = fr.trajectory.states;
    int len = traj.rows(), d = traj.cols();

    LinearityReport report = linearity_epsilon(traj, options.tau);
    out << i << ",linearity_epsilon,0," << fmt_double(report.epsilon_hat) << "\n";
    summary.mean_linearity_epsilon += report.epsilon_hat;

    for (int pos = 1; pos + 1 < len; ++pos) {
      double prev_sq = kNormGuard * kNormGuard, next_sq = kNormGuard * kNormGuard, cross = 0.0;
      for (int j = 0; j < d; ++j) {
        double a = traj.at(pos, j) - traj.at(pos - 1, j);
        double b = traj.at(pos + 1, j) - traj.at(pos, j);
        prev_sq += a * a;
        next_sq += b * b;
        cross += a * b;
      }
      double cosine = cross / std::sqrt(prev_sq * next_sq);
      cosine = std::clamp(cosine, -(1.0 - kAcosClamp), 1.0 - kAcosClamp);
      out << i << ",curvature," << pos << "," << fmt_double(std::acos(cosine)) << "\n";
    }

    SpanMarks marks = ex.marks();
    std::vector<int> prompt(seq.begin(), seq.begin() + marks.query_end + 2);
    std::vector<int> continuation(seq.begin() + marks.query_end + 2, seq.end());
    std::vector<double> series = rollout_divergence(params, prompt, continuation);
    for (size_t j = 0; j < series.size(); ++j)
      out << i << ",rollout_divergence," << j << "," << fmt_double(series[j]) << "\n";

    // Answer-mean minus query-mean state, one row per sequence.
    std::vector<double> diff(d, 0.0);
    int q0 = marks.query_start, q1 = marks.query_end;
    int a0 = marks.query_end + 2, a1 = marks.answer_end;
    for (int j = 0; j < d; ++j) {
      double qm = 0.0, am = 0.0;
      for (int p = q0; p <= q1; ++p) qm += traj.at(p, j);
      for (int p = a0; p <= a1; ++p) am += traj.at(p, j);
      diff[j] = am / (a1 - a0 + 1) - qm / (q1 - q0 + 1);
    }
    diff_rows.push_back(std::move(diff));
  }
  summary.sequences = count;
  if (count > 0) summary.mean_linearity_epsilon /= count;

  if (!diff_rows.empty()) {
    int d = static_cast<int>(diff_rows[0].size());
    Tensor matrix = Tensor::zeros({static_cast<int>(diff_rows.size()), d});
    for (size_t i = 0; i < diff_rows.size(); ++i)
      for (int j = 0; j < d; ++j) matrix.at(static_cast<int>(i), j) = diff_rows[i][j];
    std::vector<double> raw = svd_spectrum(matrix, false);
    std::vector<double> normalized = svd_spectrum(matrix, true);
    for (size_t j = 0; j < raw.size(); ++j)
      out << -1 << ",svd_raw," << j << "," << fmt_double(raw[j]) << "\n";
    for (size_t j = 0; j < normalized.size(); ++j)
      out << -1 << ",svd_normalized," << j << "," << fmt_double(normalized[j]) << "\n";
  }
  if (!out) throw std::runtime_error("diagnose: write failed");
  return summary;
}

// ---- config -------------------------------------------------------------------

namespace {

int to_int(const std::string& v) {
  size_t pos = 0;
  int out = std::stoi(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
  return out;
}

uint64_t to_u64(const std::string& v) {
  size_t pos = 0;
  unsigned long long out = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
  return out;
}

double to_double(const std::string& v) {
  size_t pos = 0;
  double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not a number: '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_override(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "vocab_size") c.model.vocab_size = to_int(value);
  else if (key == "d_model") c.model.d_model = to_int(value);
  else if (key == "n_layers") c.model.n_layers = to_int(value);
  else if (key == "n_heads") c.model.n_heads = to_int(value);
  else if (key == "d_ff") c.model.d_ff = to_int(value);
  else if (key == "max_seq_len") c.model.max_seq_len = to_int(value);
  else if (key == "tie_embeddings") c.model.tie_embeddings = to_bool(value);
  else if (key == "task") c.task.name = value;
  else if (key == "n_train") c.task.n_train = to_int(value);
  else if (key == "n_test") c.task.n_test = to_int(value);
  else if (key == "suffix_ratio") c.task.suffix_ratio = to_double(value);
  else if (key == "payload_len") c.task.payload_len = to_int(value);
  else if (key == "data_seed") c.task.data_seed = to_u64(value);
  else if (key == "variant") c.variant = variant_from_name(value);
  else if (key == "lambda") c.lambda = to_double(value);
  else if (key == "warmup_steps") c.warmup_steps = to_int(value);
  else if (key == "lr") c.adam.lr = to_double(value);
  else if (key == "batch_size") c.batch_size = to_int(value);
  else if (key == "epochs") c.epochs = to_int(value);
  else if (key == "seed") c.seed = to_u64(value);
  else if (key == "fraction_n") c.fraction_n = to_int(value);
  else if (key == "half_compute") c.half_compute = to_bool(value);
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "p1_ntp_range_max") c.p1_ntp_range_max = to_double(value);
  else if (key == "p1_stp_decrease_min") c.p1_stp_decrease_min = to_double(value);
  else throw std::invalid_argument("unknown key '" + key + "'");
}

TrainConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  TrainConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                  ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      apply_override(config, key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

// ---- CLI ------------------------------------------------------------------------

namespace {

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list: '" + s + "'");
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list: '" + s + "'");
  return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_u64(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list: '" + s + "'");
  return out;
}

struct CliArgs {
  TrainConfig config;
  std::map<std::string, std::string> local;
};

// Local (non-config) flags per subcommand; every other --key goes through
// apply_override and unknown keys are hard errors.
CliArgs parse_cli(const std::vector<std::string>& args, const std::set<std::string>& local_keys,
                  const std::set<std::string>& valueless) {
  CliArgs out;
  // Config file first, then flag overrides in order.
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw std::invalid_argument("--config requires a path");
      out.config = parse_config(args[i + 1]);
    }
  }
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& arg = args[i];
    if (arg.rfind("--", 0) != 0)
      throw std::invalid_argument("unexpected argument '" + arg + "'");
    std::string key, value;
    size_t eq = arg.find('=');
    bool has_value = false;
    if (eq != std::string::npos) {
      key = arg.substr(2, eq - 2);
      value = arg.substr(eq + 1);
      has_value = true;
    } else {
      key = arg.substr(2);
    }
    if (valueless.count(key)) {
      out.local[key] = has_value ? value : "1";
      continue;
    }
    if (!has_value) {
      if (i + 1 >= args.size()) throw std::invalid_argument("--" + key + " requires a value");
      value = args[++i];
    }
    if (key == "config") continue;  // already handled
    if (local_keys.count(key)) {
      out.local[key] = value;
      continue;
    }
    apply_override(out.config, key, value);
  }
  return out;
}

void print_run_summary(const TrainOutcome& outcome) {
  const RunRecord& r = outcome.record;
  std::printf("steps %zu  final_ntp %.6f  final_stp %.6f\n", r.rows.size(), r.final_ntp,
              r.final_stp);
  std::printf("exact_match %.4f  (STAR %.4f, STARSTAR %.4f)\n", r.accuracy, r.acc_star,
              r.acc_starstar);
  std::printf("p1: ntp_range %.4f (plateau=%s)  stp_drop %.4f (decreasing=%s)\n", r.p1_ntp_range,
              r.p1_ntp_plateau ? "yes" : "no", r.p1_stp_drop, r.p1_stp_decreasing ? "yes" : "no");
  std::printf("metrics %s\ncheckpoint %s\nwall %.1fs\n", r.metrics_path.c_str(),
              r.checkpoint_path.c_str(), r.wall_seconds);
}

int cmd_train(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {}, {});
  TrainOutcome outcome = train_run(cli.config);
  print_run_summary(outcome);
  return 0;
}

int cmd_eval(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"checkpoint", "data"}, {});
  if (!cli.local.count("checkpoint"))
    throw std::invalid_argument("eval: --checkpoint is required");
  ModelParams params = load_checkpoint(cli.local.at("checkpoint"));
  DatasetSplit split = cli.local.count("data") ? load_split(cli.local.at("data"))
                                               : build_dataset(cli.config.task);
  EvalResult result = evaluate_exact_match(params, split.test);
  std::printf("exact_match %.4f  n=%d\n", result.accuracy, result.n);
  std::printf("STAR %.4f (n=%d)  STARSTAR %.4f (n=%d)\n", result.acc_star, result.n_star,
              result.acc_starstar, result.n_starstar);
  return 0;
}

int cmd_sweep(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"grid", "seeds"}, {});
  std::vector<double> grid = cli.local.count("grid")
                                 ? parse_double_list(cli.local.at("grid"))
                                 : std::vector<double>{0.0, 0.005, 0.02, 0.08};
  std::vector<uint64_t> seeds = cli.local.count("seeds")
                                    ? parse_seed_list(cli.local.at("seeds"))
                                    : default_seeds();
  SweepResult result = sweep_lambda(cli.config, grid, seeds);
  std::printf("lambda  mean_final_stp  mean_accuracy\n");
  for (size_t g = 0; g < result.grid.size(); ++g)
    std::printf("%-7g %-15.6f %.4f\n", result.grid[g], result.mean_final_stp[g],
                result.mean_accuracy[g]);
  std::printf("aggregate %s\n", result.aggregate_path.c_str());
  return 0;
}

int cmd_data_eff(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"fractions", "seeds"}, {"half-compute-arm"});
  if (cli.config.lambda <= 0.0) cli.config.lambda = 0.02;
  std::vector<int> fractions = cli.local.count("fractions")
                                   ? parse_int_list(cli.local.at("fractions"))
                                   : std::vector<int>{1, 2, 4};
  std::vector<uint64_t> seeds = cli.local.count("seeds")
                                    ? parse_seed_list(cli.local.at("seeds"))
                                    : default_seeds();
  bool half_arm = cli.local.count("half-compute-arm") > 0;
  DataEfficiencyResult result = data_efficiency_experiment(cli.config, fractions, seeds, half_arm);

  std::printf("fraction  variant         mean_acc  sd\n");
  size_t arms = result.rows.size() / (fractions.size() * seeds.size());
  for (size_t f = 0; f < fractions.size(); ++f) {
    for (size_t a = 0; a < arms; ++a) {
      std::vector<double> acc;
      for (size_t s = 0; s < seeds.size(); ++s)
        acc.push_back(result.rows[(f * arms + a) * seeds.size() + s].accuracy);
      std::printf("1/%-8d %-15s %.4f    %.4f\n", fractions[f],
                  result.rows[(f * arms + a) * seeds.size()].variant.c_str(), mean_of(acc),
                  sd_of(acc));
    }
  }
  for (const PairedTest& test : result.tests) {
    if (test.degenerate)
      std::printf("fraction 1/%d: paired t-test degenerate (all differences equal)\n",
                  test.fraction_n);
    else
      std::printf("fraction 1/%d: paired one-tailed t=%.4f p=%.6f\n", test.fraction_n,
                  test.t_stat, test.p);
  }
  std::printf("aggregate %s\n", result.aggregate_path.c_str());
  return 0;
}

int cmd_diagnose(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"checkpoint", "data", "tau", "max-sequences", "out"}, {});
  if (!cli.local.count("checkpoint"))
    throw std::invalid_argument("diagnose: --checkpoint is required");
  ModelParams params = load_checkpoint(cli.local.at("checkpoint"));
  DatasetSplit split = cli.local.count("data") ? load_split(cli.local.at("data"))
                                               : build_dataset(cli.config.task);
  DiagnoseOptions options;
  if (cli.local.count("tau")) options.tau = to_int(cli.local.at("tau"));
  if (cli.local.count("max-sequences")) options.max_sequences = to_int(cli.local.at("max-sequences"));
  if (cli.local.count("out")) options.out_path = cli.local.at("out");
  DiagnoseSummary summary = diagnose(params, split, options);
  std::printf("sequences %d  mean_linearity_epsilon %.6f\n", summary.sequences,
              summary.mean_linearity_epsilon);
  std::printf("diagnostics %s\n", options.out_path.c_str());
  return 0;
}

int cmd_theory(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"hy", "eps-bits", "snr", "m", "vocab", "csv"},
                          {"full-vocab-log"});
  double hy = cli.local.count("hy") ? to_double(cli.local.at("hy")) : 4.0;
  double eps = cli.local.count("eps-bits") ? to_double(cli.local.at("eps-bits")) : 0.0;
  std::vector<double> snrs = cli.local.count("snr") ? parse_double_list(cli.local.at("snr"))
                                                    : std::vector<double>{0.0, 1.0, 3.0, 15.0};
  std::vector<double> ms = cli.local.count("m") ? parse_double_list(cli.local.at("m"))
                                                : std::vector<double>{1.0, 2.0, 4.0};
  int vocab = cli.local.count("vocab") ? to_int(cli.local.at("vocab")) : 17;
  bool full_log = cli.local.count("full-vocab-log") > 0;

  std::ofstream csv;
  if (cli.local.count("csv")) {
    csv.open(cli.local.at("csv"));
    if (!csv) throw std::runtime_error("theory: cannot open csv path");
    csv << "H_Y,epsilon,snr,m,capacity_bits,min_samples,cond_entropy_bound,fano_error_bound\n";
  }
  std::printf("H_Y=%g bits, eps=%g bits, vocab=%d (denominator log2(|V|%s))\n", hy, eps, vocab,
              full_log ? "" : "-1");
  std::printf("%-8s %-6s %-14s %-12s %-18s %s\n", "snr", "m", "capacity_bits", "min_samples",
              "cond_entropy_bits", "fano_error");
  for (double snr : snrs) {
    for (double m : ms) {
      double cap = gaussian_capacity(snr);
      double ms_needed = min_samples(hy, eps, snr);
      double ce = conditional_entropy_lower_bound(hy, m, cap);
      double fano = fano_error_lower_bound(hy, m, snr, vocab, full_log);
      std::printf("%-8g %-6g %-14.6f %-12.4f %-18.6f %.6f\n", snr, m, cap, ms_needed, ce, fano);
      if (csv.is_open())
        csv << fmt_g(hy) << "," << fmt_g(eps) << "," << fmt_g(snr) << "," << fmt_g(m) << ","
            << fmt_double(cap) << "," << fmt_double(ms_needed) << "," << fmt_double(ce) << ","
            << fmt_double(fano) << "\n";
    }
  }
  return 0;
}

int cmd_ttest(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"a", "b"}, {});
  if (!cli.local.count("a") || !cli.local.count("b"))
    throw std::invalid_argument("ttest: --a and --b comma lists are required");
  std::vector<double> a = parse_double_list(cli.local.at("a"));
  std::vector<double> b = parse_double_list(cli.local.at("b"));
  TTestResult result = paired_t_test_one_tailed(a, b);
  std::printf("t=%.6f df=%d p=%.6f\n", result.t_stat, result.df, result.p);
  return 0;
}

int cmd_gen_data(const std::vector<std::string>& args) {
  CliArgs cli = parse_cli(args, {"out"}, {});
  std::string out_path = cli.local.count("out") ? cli.local.at("out") : "dataset.txt";
  DatasetSplit split = build_dataset(cli.config.task);
  dump_split(split, out_path);
  std::printf("task %s: %zu train / %zu test -> %s\n", split.task_tag.c_str(),
              split.train.size(), split.test.size(), out_path.c_str());
  return 0;
}

void print_usage() {
  std::fprintf(stderr,
               "usage: stp <subcommand> [--config file] [--key value ...]\n"
               "subcommands:\n"
               "  train      train one model; writes metrics CSV and checkpoint\n"
               "  eval       --checkpoint <path> [--data <file>] exact-match evaluation\n"
               "  sweep      [--grid 0,0.005,0.02,0.08] [--seeds 82,23,37,84,4] lambda sweep\n"
               "  data-eff   [--fractions 1,2,4] [--seeds ...] [--half-compute-arm]\n"
               "  diagnose   --checkpoint <path> [--tau 8] [--max-sequences 50] [--out csv]\n"
               "  theory     [--hy 4] [--eps-bits 0] [--snr list] [--m list] [--vocab 17]\n"
               "  ttest      --a 1,2,3 --b 0,0,0\n"
               "  gen-data   [--out dataset.txt] dataset dump\n");
}

}  // namespace

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 2; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    if (argc < 2) {
      print_usage();
      return 1;
    }
    std::string cmd = argv[1];
    if (cmd == "train") return cmd_train(args);
    if (cmd == "eval") return cmd_eval(args);
    if (cmd == "sweep") return cmd_sweep(args);
    if (cmd == "data-eff") return cmd_data_eff(args);
    if (cmd == "diagnose") return cmd_diagnose(args);
    if (cmd == "theory") return cmd_theory(args);
    if (cmd == "ttest") return cmd_ttest(args);
    if (cmd == "gen-data") return cmd_gen_data(args);
    std::fprintf(stderr, "error: unknown subcommand '%s'\n", cmd.c_str());
    print_usage();
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace stp
