#pragma once

// Training orchestration: config file handling, the epoch loop, evaluation,
// checkpointing, and metrics logging.
//
// Reproducibility contract: everything stochastic is a pure function of the
// master seed — parameter init uses it directly and epoch e shuffles with
// hash_mix(seed, epoch-salt, e) — so resuming from a checkpoint needs only
// the epoch counter and replays the exact batch order an uninterrupted run
// would have seen.  Wall-clock timings go to a sidecar file so the metrics
// CSV itself is byte-reproducible across runs.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcam/adam.hpp"
#include "mcam/data.hpp"
#include "mcam/io.hpp"
#include "mcam/model.hpp"
#include "mcam/objective.hpp"
#include "mcam/random.hpp"

namespace mcam {

struct TrainConfig {
  int64_t epochs = 20;
  int64_t batch_size = 32;
  double learning_rate = 1e-3;
  LossWeights weights;
  bool mask_l1_per_sample = true;
  uint64_t seed = 0;
  int64_t eval_samples = 500;   // used when eval_data is not given
  int64_t eval_batch_size = 64;
  NetworkConfig network;  // image size / channels / attribute count are
                          // overwritten from the dataset at train time
  std::string train_data;
  std::string eval_data;
  std::string checkpoint_out;
  std::string metrics_out;
  std::string resume;

  void validate() const {
    detail::check(epochs >= 1, "train config: epochs must be >= 1");
    detail::check(batch_size >= 1, "train config: batch_size must be >= 1");
    detail::check(learning_rate > 0.0, "train config: learning_rate must be positive");
    detail::check(eval_samples >= 1, "train config: eval_samples must be >= 1");
    detail::check(eval_batch_size >= 1, "train config: eval_batch_size must be >= 1");
    weights.validate();
  }
};

namespace detail {

inline constexpr uint64_t kEpochSalt = 0x65706f6368ull;  // shuffle stream tag

inline std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<int64_t> parse_int_list(const std::string& value, const std::string& key) {
  std::vector<int64_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    check(!item.empty(), "config key '" + key + "': empty list element");
    size_t used = 0;
    out.push_back(std::stoll(item, &used));
    check(used == item.size(), "config key '" + key + "': bad integer '" + item + "'");
  }
  check(!out.empty(), "config key '" + key + "': empty list");
  return out;
}

inline int64_t parse_int(const std::string& value, const std::string& key) {
  size_t used = 0;
  const int64_t v = std::stoll(value, &used);
  check(used == value.size(), "config key '" + key + "': bad integer '" + value + "'");
  return v;
}

inline uint64_t parse_uint(const std::string& value, const std::string& key) {
  size_t used = 0;
  const uint64_t v = std::stoull(value, &used);
  check(used == value.size(), "config key '" + key + "': bad integer '" + value + "'");
  return v;
}

inline double parse_float(const std::string& value, const std::string& key) {
  size_t used = 0;
  const double v = std::stod(value, &used);
  check(used == value.size(), "config key '" + key + "': bad number '" + value + "'");
  return v;
}

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config key '" + key + "': expected true/false, got '" + value +
                              "'");
}

// Applies one key=value pair; unknown keys are an error so typos cannot
// silently fall back to defaults.
inline void apply_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "epochs") cfg.epochs = parse_int(value, key);
  else if (key == "batch_size") cfg.batch_size = parse_int(value, key);
  else if (key == "learning_rate") cfg.learning_rate = parse_float(value, key);
  else if (key == "alpha") cfg.weights.alpha = parse_float(value, key);
  else if (key == "beta") cfg.weights.beta = parse_float(value, key);
  else if (key == "gamma") cfg.weights.gamma = parse_float(value, key);
  else if (key == "lambda") cfg.weights.lambda = parse_float(value, key);
  else if (key == "mask_l1_per_sample") cfg.mask_l1_per_sample = parse_bool(value, key);
  else if (key == "seed") cfg.seed = parse_uint(value, key);
  else if (key == "eval_samples") cfg.eval_samples = parse_int(value, key);
  else if (key == "eval_batch_size") cfg.eval_batch_size = parse_int(value, key);
  else if (key == "feature_channels") cfg.network.feature_channels = parse_int(value, key);
  else if (key == "dilation_schedule") cfg.network.dilation_schedule = parse_int_list(value, key);
  else if (key == "extractor_channels") cfg.network.extractor_channels = parse_int_list(value, key);
  else if (key == "mask_hidden") cfg.network.mask_hidden = parse_int(value, key);
  else if (key == "head_hidden") cfg.network.head_hidden = parse_int(value, key);
  else if (key == "recon_hidden") cfg.network.recon_hidden = parse_int(value, key);
  else if (key == "train_data") cfg.train_data = value;
  else if (key == "eval_data") cfg.eval_data = value;
  else if (key == "checkpoint_out") cfg.checkpoint_out = value;
  else if (key == "metrics_out") cfg.metrics_out = value;
  else if (key == "resume") cfg.resume = value;
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace detail

// Line-oriented key=value text; blank lines and '#' comments are skipped.
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value, got '" + stripped + "'");
    detail::apply_config_key(cfg, detail::trim(stripped.substr(0, eq)),
                             detail::trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

// Every effective setting as key=value lines, echoable and re-parseable.
inline std::string describe_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "epochs=" << cfg.epochs << "\n";
  os << "batch_size=" << cfg.batch_size << "\n";
  os << "learning_rate=" << format_double(cfg.learning_rate) << "\n";
  os << "alpha=" << format_double(cfg.weights.alpha) << "\n";
  os << "beta=" << format_double(cfg.weights.beta) << "\n";
  os << "gamma=" << format_double(cfg.weights.gamma) << "\n";
  os << "lambda=" << format_double(cfg.weights.lambda) << "\n";
  os << "mask_l1_per_sample=" << (cfg.mask_l1_per_sample ? "true" : "false") << "\n";
  os << "seed=" << cfg.seed << "\n";
  os << "eval_samples=" << cfg.eval_samples << "\n";
  os << "eval_batch_size=" << cfg.eval_batch_size << "\n";
  os << "feature_channels=" << cfg.network.feature_channels << "\n";
  auto join = [](const std::vector<int64_t>& v) {
    std::ostringstream o;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) o << ',';
      o << v[i];
    }
    return o.str();
  };
  os << "dilation_schedule=" << join(cfg.network.dilation_schedule) << "\n";
  os << "extractor_channels=" << join(cfg.network.extractor_channels) << "\n";
  os << "mask_hidden=" << cfg.network.mask_hidden << "\n";
  os << "head_hidden=" << cfg.network.head_hidden << "\n";
  os << "recon_hidden=" << cfg.network.recon_hidden << "\n";
  os << "train_data=" << cfg.train_data << "\n";
  os << "eval_data=" << cfg.eval_data << "\n";
  os << "checkpoint_out=" << cfg.checkpoint_out << "\n";
  os << "metrics_out=" << cfg.metrics_out << "\n";
  os << "resume=" << cfg.resume << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[9] = "MCAMCK1";

struct Checkpoint {
  Network network;
  OptimizerState optimizer;
  uint64_t epochs_completed = 0;
  uint64_t seed = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const Network& net,
                            const OptimizerState& opt, uint64_t epochs_completed,
                            uint64_t seed) {
  detail::ByteWriter w;
  w.u32(1);  // format version
  const NetworkConfig& c = net.config;
  w.i64(c.image_channels);
  w.i64(c.image_size);
  w.i64(c.feature_channels);
  w.i64(c.num_attributes);
  w.u32(static_cast<uint32_t>(c.dilation_schedule.size()));
  for (int64_t d : c.dilation_schedule) w.i64(d);
  w.u32(static_cast<uint32_t>(c.extractor_channels.size()));
  for (int64_t e : c.extractor_channels) w.i64(e);
  w.i64(c.mask_hidden);
  w.i64(c.head_hidden);
  w.i64(c.recon_hidden);
  w.u64(c.seed);

  const std::vector<Tensor> params = net.parameters();
  w.u32(static_cast<uint32_t>(params.size()));
  for (const Tensor& p : params) {
    w.u32(static_cast<uint32_t>(p.ndim()));
    for (int64_t d : p.shape()) w.i64(d);
    for (double v : p.data()) w.f64(v);
  }

  const AdamConfig& a = opt.config();
  w.f64(a.learning_rate);
  w.f64(a.beta1);
  w.f64(a.beta2);
  w.f64(a.epsilon);
  w.u64(opt.step_count());
  detail::check(opt.slot_count() == params.size(),
                "checkpoint: optimizer tracks " + std::to_string(opt.slot_count()) +
                    " tensors, network has " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    for (double v : opt.first_moment(i)) w.f64(v);
    for (double v : opt.second_moment(i)) w.f64(v);
  }
  w.u64(epochs_completed);
  w.u64(seed);
  write_framed_file(path, kCheckpointMagic, w.bytes());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<unsigned char> payload = read_framed_file(path, kCheckpointMagic);
  detail::ByteReader r(payload);
  const uint32_t version = r.u32();
  if (version != 1)
    throw version_error(path.string() + ": unsupported checkpoint version " +
                        std::to_string(version));
  NetworkConfig c;
  c.image_channels = r.i64();
  c.image_size = r.i64();
  c.feature_channels = r.i64();
  c.num_attributes = r.i64();
  c.dilation_schedule.resize(r.u32());
  for (int64_t& d : c.dilation_schedule) d = r.i64();
  c.extractor_channels.resize(r.u32());
  for (int64_t& e : c.extractor_channels) e = r.i64();
  c.mask_hidden = r.i64();
  c.head_hidden = r.i64();
  c.recon_hidden = r.i64();
  c.seed = r.u64();
  c.validate();

  Checkpoint ck;
  ck.network = init_network(c);  // allocates the right structure, then overwritten
  std::vector<Tensor> params = ck.network.parameters();
  const uint32_t count = r.u32();
  if (count != params.size())
    throw checksum_error(path.string() + ": checkpoint has " + std::to_string(count) +
                         " tensors, config implies " + std::to_string(params.size()));
  for (Tensor& p : params) {
    const uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (int64_t& d : shape) d = r.i64();
    if (shape != p.shape())
      throw checksum_error(path.string() + ": tensor shape " + shape_str(shape) +
                           " does not match config shape " + shape_str(p.shape()));
    for (double& v : p.data()) v = r.f64();
  }

  AdamConfig a;
  a.learning_rate = r.f64();
  a.beta1 = r.f64();
  a.beta2 = r.f64();
  a.epsilon = r.f64();
  ck.optimizer = OptimizerState(params, a);
  ck.optimizer.set_step_count(r.u64());
  for (size_t i = 0; i < params.size(); ++i) {
    for (double& v : ck.optimizer.first_moment(i)) v = r.f64();
    for (double& v : ck.optimizer.second_moment(i)) v = r.f64();
  }
  ck.epochs_completed = r.u64();
  ck.seed = r.u64();
  if (r.remaining() != 0)
    throw checksum_error(path.string() + ": trailing bytes after checkpoint payload");
  return ck;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::vector<double> binary_accuracy;      // per attribute, threshold 0.5
  std::vector<double> multilabel_accuracy;  // per attribute, multi-label head
  double binary_accuracy_mean = 0.0;
  double multilabel_accuracy_mean = 0.0;
};

inline EvalResult evaluate(const Network& net, const Dataset& ds, int64_t batch_size = 64) {
  detail::check(ds.spec.num_attributes == net.config.num_attributes,
                "evaluate: dataset has " + std::to_string(ds.spec.num_attributes) +
                    " attributes, network expects " +
                    std::to_string(net.config.num_attributes));
  detail::check(ds.spec.image_size == net.config.image_size,
                "evaluate: dataset image size " + std::to_string(ds.spec.image_size) +
                    " != network image size " + std::to_string(net.config.image_size));
  const int64_t k = net.config.num_attributes;
  std::vector<int64_t> binary_hits(static_cast<size_t>(k), 0);
  std::vector<int64_t> multi_hits(static_cast<size_t>(k), 0);
  // Accuracy needs only the two classifier outputs, so this runs a trimmed
  // forward: shared features once, then per attribute mask -> pooled ->
  // binary head.  The probabilities are bitwise the ones forward_full
  // produces; the reconstruction decoder and the full-resolution modulated
  // volumes simply never run.
  for (const SampleBatch& batch : sequential_batches(ds, batch_size)) {
    Graph g(Graph::Mode::no_grad);
    Tensor features = extract_features(g, net, batch.images);
    const int64_t b = batch.images.dim(0);
    auto y = batch.labels.data();
    for (int64_t a = 0; a < k; ++a) {
      Tensor mask = attention_mask(g, net, features, a);
      Tensor probs = detail::binary_head_from_pooled(g, net, attention_pool(g, features, mask), a);
      auto bp = probs.data();
      for (int64_t i = 0; i < b; ++i) {
        const double truth = y[i * k + a];
        binary_hits[static_cast<size_t>(a)] += ((bp[i] >= 0.5) == (truth == 1.0));
      }
    }
    Tensor multilabel = predict_multilabel(g, net, features);
    auto mp = multilabel.data();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t a = 0; a < k; ++a) {
        const double truth = y[i * k + a];
        multi_hits[static_cast<size_t>(a)] += ((mp[i * k + a] >= 0.5) == (truth == 1.0));
      }
  }
  EvalResult result;
  const double n = static_cast<double>(ds.size());
  for (int64_t a = 0; a < k; ++a) {
    result.binary_accuracy.push_back(static_cast<double>(binary_hits[static_cast<size_t>(a)]) / n);
    result.multilabel_accuracy.push_back(static_cast<double>(multi_hits[static_cast<size_t>(a)]) / n);
    result.binary_accuracy_mean += result.binary_accuracy.back();
    result.multilabel_accuracy_mean += result.multilabel_accuracy.back();
  }
  result.binary_accuracy_mean /= static_cast<double>(k);
  result.multilabel_accuracy_mean /= static_cast<double>(k);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

struct EpochMetrics {
  int64_t epoch = 0;  // 1-based
  double total = 0.0, binary = 0.0, multilabel = 0.0, reconstruction = 0.0, mask_l1 = 0.0;
  std::vector<double> accuracy;  // per-attribute eval accuracy (binary heads)
  double accuracy_mean = 0.0;
  double multilabel_accuracy_mean = 0.0;
  double seconds = 0.0;  // wall clock; sidecar file only
};

using MetricsLog = std::vector<EpochMetrics>;

// Deterministic content only: training losses and evaluation accuracies.
inline std::string metrics_csv(const MetricsLog& log) {
  std::ostringstream os;
  const size_t k = log.empty() ? 0 : log.front().accuracy.size();
  os << "epoch,total,binary,multilabel,reconstruction,mask_l1";
  for (size_t a = 0; a < k; ++a) os << ",acc_" << a;
  os << ",acc_mean,multilabel_acc_mean\n";
  for (const EpochMetrics& row : log) {
    os << row.epoch << ',' << format_double(row.total) << ',' << format_double(row.binary)
       << ',' << format_double(row.multilabel) << ',' << format_double(row.reconstruction)
       << ',' << format_double(row.mask_l1);
    for (double a : row.accuracy) os << ',' << format_double(a);
    os << ',' << format_double(row.accuracy_mean) << ','
       << format_double(row.multilabel_accuracy_mean) << "\n";
  }
  return os.str();
}

// Wall-clock sidecar, one row per epoch, kept out of the main CSV so that
// file stays byte-identical across reruns.
inline std::string timing_csv(const MetricsLog& log) {
  std::ostringstream os;
  os << "epoch,seconds\n";
  for (const EpochMetrics& row : log) os << row.epoch << ',' << format_double(row.seconds) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  Network network;
  OptimizerState optimizer;
  MetricsLog log;
  EvalResult final_eval;
};

// `on_epoch`, when set, receives each metrics row as it is produced (for
// progress reporting); it has no effect on the training computation.
using EpochCallback = std::function<void(const EpochMetrics&)>;

inline TrainResult train(const TrainConfig& user_cfg, const Dataset& train_ds,
                         const Dataset& eval_ds, const EpochCallback& on_epoch = {}) {
  TrainConfig cfg = user_cfg;
  cfg.validate();
  detail::check(train_ds.size() > 0, "train: training dataset is empty");
  detail::check(train_ds.spec.num_attributes == eval_ds.spec.num_attributes &&
                    train_ds.spec.image_size == eval_ds.spec.image_size,
                "train: train/eval dataset shapes disagree");

  cfg.network.image_channels = 1;
  cfg.network.image_size = train_ds.spec.image_size;
  cfg.network.num_attributes = train_ds.spec.num_attributes;
  cfg.network.seed = cfg.seed;
  cfg.network.validate();

  Network net;
  OptimizerState opt;
  uint64_t start_epoch = 1;
  if (!cfg.resume.empty()) {
    Checkpoint ck = load_checkpoint(cfg.resume);
    detail::check(ck.network.config == cfg.network,
                  "resume: checkpoint network config does not match this run's config");
    detail::check(ck.seed == cfg.seed, "resume: checkpoint seed " + std::to_string(ck.seed) +
                                           " != configured seed " + std::to_string(cfg.seed));
    detail::check(ck.optimizer.config().learning_rate == cfg.learning_rate,
                  "resume: checkpoint learning rate differs from configured one");
    detail::check(static_cast<int64_t>(ck.epochs_completed) < cfg.epochs,
                  "resume: checkpoint already has " + std::to_string(ck.epochs_completed) +
                      " epochs, config asks for " + std::to_string(cfg.epochs) + " total");
    net = std::move(ck.network);
    opt = std::move(ck.optimizer);
    start_epoch = ck.epochs_completed + 1;
  } else {
    net = init_network(cfg.network);
    opt = OptimizerState(net.parameters(), AdamConfig{.learning_rate = cfg.learning_rate});
  }

  std::vector<Tensor> params = net.parameters();
  MetricsLog log;
  for (int64_t epoch = static_cast<int64_t>(start_epoch); epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double sum_total = 0, sum_b = 0, sum_m = 0, sum_r = 0, sum_l1 = 0;
    int64_t seen = 0, batch_index = 0;
    for (const SampleBatch& batch :
         batches(train_ds, cfg.batch_size, hash_mix(cfg.seed, detail::kEpochSalt,
                                                    static_cast<uint64_t>(epoch)))) {
      Graph g;
      ForwardOutputs out = forward_full(g, net, batch.images);
      TotalLoss loss =
          total_loss(g, out, batch.labels, batch.images, cfg.weights, cfg.mask_l1_per_sample);
      const LossBreakdown& v = loss.values;
      const struct { const char* name; double value; } terms[] = {
          {"binary", v.binary}, {"multilabel", v.multilabel},
          {"reconstruction", v.reconstruction}, {"mask_l1", v.mask_l1}, {"total", v.total}};
      for (const auto& term : terms)
        if (!std::isfinite(term.value))
          throw std::runtime_error("train: non-finite " + std::string(term.name) +
                                   " loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
      g.backward(loss.total);
      opt.step(params);
      for (Tensor& p : params) p.zero_grad();
      const double b = static_cast<double>(batch.images.dim(0));
      sum_total += v.total * b;
      sum_b += v.binary * b;
      sum_m += v.multilabel * b;
      sum_r += v.reconstruction * b;
      sum_l1 += v.mask_l1 * b;
      seen += batch.images.dim(0);
      ++batch_index;
    }
    EpochMetrics row;
    row.epoch = epoch;
    const double n = static_cast<double>(seen);
    row.total = sum_total / n;
    row.binary = sum_b / n;
    row.multilabel = sum_m / n;
    row.reconstruction = sum_r / n;
    row.mask_l1 = sum_l1 / n;
    const EvalResult er = evaluate(net, eval_ds, cfg.eval_batch_size);
    row.accuracy = er.binary_accuracy;
    row.accuracy_mean = er.binary_accuracy_mean;
    row.multilabel_accuracy_mean = er.multilabel_accuracy_mean;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(std::move(row));
    if (on_epoch) on_epoch(log.back());
  }

  if (!cfg.checkpoint_out.empty())
    save_checkpoint(cfg.checkpoint_out, net, opt, static_cast<uint64_t>(cfg.epochs), cfg.seed);
  if (!cfg.metrics_out.empty()) {
    write_text_file(cfg.metrics_out, metrics_csv(log));
    write_text_file(cfg.metrics_out + ".timing", timing_csv(log));
  }

  TrainResult result;
  result.final_eval = evaluate(net, eval_ds, cfg.eval_batch_size);
  result.network = std::move(net);
  result.optimizer = std::move(opt);
  result.log = std::move(log);
  return result;
}

// Loads datasets from the configured paths; eval data falls back to a fresh
// test split drawn from the training dataset's generator spec.
inline TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  detail::check(!cfg.train_data.empty(), "train: train_data path is required");
  const Dataset train_ds = load_dataset(cfg.train_data);
  Dataset eval_ds;
  if (!cfg.eval_data.empty()) {
    eval_ds = load_dataset(cfg.eval_data);
  } else {
    DatasetSpec eval_spec = train_ds.spec;
    eval_spec.num_samples = cfg.eval_samples;
    eval_ds = generate_dataset(eval_spec, Split::test);
  }
  return train(cfg, train_ds, eval_ds, on_epoch);
}

}  // namespace mcam
