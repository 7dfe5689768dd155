#include "binreplay/learner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

namespace binreplay {

void ContinualConfig::validate() const {
  bits.validate();
  if (quota < 1) throw ValidationError("replay quota N must be >= 1");
  if (batch_new < 1) throw ValidationError("B_N must be >= 1");
  if (batch_replay < 0) throw ValidationError("B_R must be >= 0");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (pretrain_epochs < 1) throw ValidationError("pretrain_epochs must be >= 1");
  if (!(lr > 0.0) || !(pretrain_lr > 0.0)) throw ValidationError("learning rates must be > 0");
  if (num_experiences < 1) throw ValidationError("num_experiences must be >= 1");
}

Graph build_reference_model(const Shape& input, Rng& rng) {
  if (input.rank() != 3) throw ValidationError("reference model expects (H, W, C) inputs, got " + input.str());
  Graph g;
  int x = g.add_input(input);
  x = g.add_conv2d(x, BinConvSpec{3, 3, 1, 1, input[2], 16}, rng, "stem");
  x = g.add_batchnorm(x, "stem_bn");
  x = g.add_sign(x, "stem_sign");
  x = g.add_binary_conv2d(x, BinConvSpec{3, 3, 2, 1, 16, 32}, rng, "block1");
  x = g.add_batchnorm(x, "block1_bn");
  x = g.add_sign(x, "block1_sign");
  x = g.add_binary_conv2d(x, BinConvSpec{3, 3, 1, 1, 32, 32}, rng, "block2");
  x = g.add_batchnorm(x, "block2_bn");
  const int level = g.add_sign(x, "replay");
  x = g.add_binary_conv2d(level, BinConvSpec{3, 3, 1, 1, 32, 32}, rng, "block3");
  x = g.add_batchnorm(x, "block3_bn");
  x = g.add_sign(x, "block3_sign");
  x = g.add_add(x, level, "residual");
  g.add_global_avg_pool(x, "features");
  g.set_replay_level(level);
  return g;
}

std::vector<Experience> make_nc_stream(const Dataset& train, int num_experiences, uint64_t seed) {
  if (num_experiences < 1) throw ValidationError("num_experiences must be >= 1");
  if (train.num_classes < num_experiences)
    throw ValidationError("fewer classes (" + std::to_string(train.num_classes) + ") than experiences (" +
                          std::to_string(num_experiences) + ")");
  std::vector<int> order(static_cast<size_t>(train.num_classes));
  for (int c = 0; c < train.num_classes; ++c) order[c] = c;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Experience> stream(static_cast<size_t>(num_experiences));
  std::vector<int> owner(static_cast<size_t>(train.num_classes));
  const int base = train.num_classes / num_experiences, extra = train.num_classes % num_experiences;
  size_t next = 0;
  for (int e = 0; e < num_experiences; ++e) {
    stream[e].index = e;
    const int n = base + (e < extra ? 1 : 0);
    for (int i = 0; i < n; ++i) {
      stream[e].classes.push_back(order[next]);
      owner[order[next++]] = e;
    }
    std::sort(stream[e].classes.begin(), stream[e].classes.end());
  }
  for (int64_t i = 0; i < train.size(); ++i) stream[owner[train.labels[i]]].samples.push_back(i);
  for (const auto& e : stream)
    if (e.samples.empty()) throw ValidationError("experience " + std::to_string(e.index) + " has no samples");
  return stream;
}

std::string MetricsLog::to_csv() const {
  std::string out = "experience,test_accuracy,mean_train_loss,fwd_macs,bwd_macs,replay_bits,elapsed_ms\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%lld,%lld,%lld,%lld\n", r.experience, r.test_accuracy,
                  r.mean_train_loss, static_cast<long long>(r.fwd_macs), static_cast<long long>(r.bwd_macs),
                  static_cast<long long>(r.replay_bits), static_cast<long long>(r.elapsed_ms));
    out += line;
  }
  return out;
}

int worker_threads() {
  if (const char* env = std::getenv("BINREPLAY_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string dataset_sha256(const Dataset& ds) {
  ByteWriter w;
  for (int64_t i = 0; i < ds.size(); ++i) {
    write_tensor(w, ds.inputs[i]);
    w.u16(static_cast<uint16_t>(ds.labels[i]));
  }
  return sha256_hex(w.buffer());
}

namespace {

/// Runs fn(chunk) for chunk in [0, chunks) on up to worker_threads() threads.
template <class Fn>
void parallel_chunks(int64_t chunks, Fn fn) {
  const int64_t workers = std::min<int64_t>(worker_threads(), chunks);
  if (workers <= 1) {
    for (int64_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int64_t t = 0; t < workers; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int64_t c = t; c < chunks; c += workers) fn(c);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

constexpr int64_t kChunk = 64;

std::vector<std::vector<int64_t>> chunks_of(const std::vector<int64_t>& idx, int64_t size) {
  std::vector<std::vector<int64_t>> out;
  for (size_t i = 0; i < idx.size(); i += size)
    out.emplace_back(idx.begin() + i, idx.begin() + std::min(idx.size(), i + size));
  return out;
}

std::vector<Tensor> batches_of(const Dataset& ds, const std::vector<int64_t>& idx) {
  std::vector<Tensor> out;
  for (const auto& c : chunks_of(idx, kChunk)) out.push_back(ds.batch(c));
  return out;
}

Tensor stack_latents(const std::vector<const BitTensor*>& items) {
  const Shape& s = items.front()->shape();
  std::vector<int64_t> dims{static_cast<int64_t>(items.size())};
  dims.insert(dims.end(), s.dims().begin(), s.dims().end());
  Tensor out{Shape(dims)};
  const int64_t n = s.numel();
  for (size_t i = 0; i < items.size(); ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] = items[i]->bit(j) ? 1.0 : -1.0;
  return out;
}

int64_t elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ContinualLearner::ContinualLearner(Graph graph, ContinualConfig cfg, int num_classes)
    : graph_(std::move(graph)), cfg_(cfg), num_classes_(num_classes), rng_(cfg.seed ^ 0x5851f42d4c957f2dULL) {
  cfg_.validate();
  replay_level_ = graph_.replay_level();
  if (replay_level_ < 0) throw ValidationError("the model has no replay level");
  const Shape feat = graph_.node(graph_.output()).out_shape;
  if (feat.rank() != 1) throw ValidationError("the model output must be a feature vector, got " + feat.str());
  head_ = CwrHead(feat[0], num_classes);
  memory_ = ReplayMemory(cfg_.quota, num_classes, graph_.node(replay_level_).out_shape);
}

void ContinualLearner::set_config(const ContinualConfig& cfg) {
  cfg.validate();
  if (cfg.quota != cfg_.quota) memory_ = ReplayMemory(cfg.quota, num_classes_, memory_.latent_shape());
  cfg_ = cfg;
}

double ContinualLearner::pretrain_float(const Dataset& train, const Experience& first) {
  if (first.samples.empty()) throw ValidationError("the first experience is empty");
  first_classes_ = first.classes;
  graph_.set_replay_level(-1);
  graph_.set_bitwidths(BitwidthConfig{});
  head_.begin_experience(first.classes);
  const auto stat_batches = batches_of(train, first.samples);
  std::vector<int64_t> order = first.samples;
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg_.pretrain_epochs; ++epoch) {
    graph_.estimate_batchnorm_stats(stat_batches);
    rng_.shuffle(order);
    double total = 0.0;
    int64_t seen = 0;
    for (const auto& ids : chunks_of(order, cfg_.batch_new)) {
      const Tensor x = train.batch(ids);
      const auto labels = train.batch_labels(ids);
      ActivationCache cache;
      const Tensor f = graph_.forward(x, Mode::train, &cache);
      const auto loss = softmax_ce(head_.train_logits(f), labels, &head_.active());
      const Tensor gf = head_.feature_grad(loss.grad);
      head_.train_step(f, loss.grad, cfg_.pretrain_lr);
      const auto br = graph_.backward(cache, gf);
      sgd_step(graph_, br.grads, cfg_.pretrain_lr);
      total += loss.loss * static_cast<double>(ids.size());
      seen += static_cast<int64_t>(ids.size());
    }
    epoch_loss = total / static_cast<double>(seen);
  }
  graph_.estimate_batchnorm_stats(stat_batches);
  graph_.set_replay_level(replay_level_);
  return epoch_loss;
}

ExperienceMetrics ContinualLearner::deploy(const Dataset& train, const Experience& first, const Dataset& test,
                                           double pretrain_loss) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperienceMetrics m;
  m.experience = first.index;
  m.mean_train_loss = pretrain_loss;
  {
    graph_.set_replay_level(-1);
    const int64_t k = head_.feature_dim() * head_.num_classes();
    const int64_t n = static_cast<int64_t>(first.samples.size()) * cfg_.pretrain_epochs;
    m.fwd_macs = (mac_count(graph_, MacMode::forward) + k) * n;
    m.bwd_macs = (mac_count(graph_, MacMode::backward) + 2 * k) * n;
    graph_.set_replay_level(replay_level_);
  }
  graph_.set_bitwidths(cfg_.bits);
  graph_.calibrate(batches_of(train, first.samples));
  for (auto i : first.samples) head_.add_count(train.labels[i], 1);
  head_.consolidate();
  memory_.update_after_experience(latents(train, first.samples), rng_);
  m.replay_bits = memory_.memory_footprint().payload_bits;
  m.test_accuracy = evaluate(test).accuracy;
  if (cfg_.record_timing) m.elapsed_ms = elapsed_since(t0);
  return m;
}

ExperienceMetrics ContinualLearner::run_experience(const Dataset& train, const Experience& e, const Dataset& test) {
  if (e.samples.empty()) throw ValidationError("experience " + std::to_string(e.index) + " is empty");
  const auto t0 = std::chrono::steady_clock::now();
  const bool replay = cfg_.batch_replay > 0 && !memory_.empty();
  std::set<int> present(e.classes.begin(), e.classes.end());
  if (replay)
    for (int c : memory_.classes()) present.insert(c);
  head_.begin_experience(std::vector<int>(present.begin(), present.end()));

  const auto fresh = latents(train, e.samples);
  for (const auto& s : fresh) head_.add_count(s.label, 1);
  if (replay)
    for (int c : memory_.classes()) head_.add_count(c, static_cast<int64_t>(memory_.bucket(c).size()));

  const int q_nb = graph_.bitwidths().q_b_nonbin;
  const bool backbone = cfg_.train_backbone;
  const int64_t k = head_.feature_dim() * head_.num_classes();
  const int64_t fwd_per = mac_count(graph_, MacMode::forward) + k;
  const int64_t bwd_per = (backbone ? mac_count(graph_, MacMode::backward) + 2 * k : k);

  ExperienceMetrics m;
  m.experience = e.index;
  std::vector<int64_t> order(fresh.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  double total = 0.0;
  int64_t seen = 0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    rng_.shuffle(order);
    for (const auto& ids : chunks_of(order, cfg_.batch_new)) {
      const auto b_n = static_cast<int64_t>(ids.size());
      // a short final batch keeps the new:replay ratio, rounding down
      const int64_t b_r = replay ? cfg_.batch_replay * b_n / cfg_.batch_new : 0;
      std::vector<const BitTensor*> items;
      std::vector<int> labels;
      for (auto i : ids) {
        items.push_back(&fresh[i].activation);
        labels.push_back(fresh[i].label);
      }
      if (b_r > 0)
        for (const LatentSample* s : memory_.sample_minibatch(b_r, rng_)) {
          items.push_back(&s->activation);
          labels.push_back(s->label);
        }
      const Tensor x = stack_latents(items);
      ActivationCache cache;
      const Tensor f = graph_.forward(x, backbone ? Mode::train : Mode::infer, backbone ? &cache : nullptr,
                                      replay_level_);
      auto loss = softmax_ce(head_.train_logits(f), labels, &head_.active());
      quantize_gradient(loss.grad, q_nb);
      if (backbone) {
        Tensor gf = head_.feature_grad(loss.grad);
        quantize_gradient(gf, q_nb);
        const auto br = graph_.backward(cache, gf);
        head_.train_step(f, loss.grad, cfg_.lr);
        sgd_step(graph_, br.grads, cfg_.lr);
      } else {
        head_.train_step(f, loss.grad, cfg_.lr);
      }
      const auto bt = static_cast<int64_t>(labels.size());
      total += loss.loss * static_cast<double>(bt);
      seen += bt;
      m.fwd_macs += fwd_per * bt;
      m.bwd_macs += bwd_per * bt;
    }
  }
  head_.consolidate();
  memory_.update_after_experience(fresh, rng_);
  m.mean_train_loss = total / static_cast<double>(seen);
  m.replay_bits = memory_.memory_footprint().payload_bits;
  m.test_accuracy = evaluate(test).accuracy;
  if (cfg_.record_timing) m.elapsed_ms = elapsed_since(t0);
  return m;
}

Tensor ContinualLearner::features(const Tensor& inputs) const { return graph_.forward(inputs, Mode::infer); }

EvalResult ContinualLearner::evaluate(const Dataset& test) const {
  if (test.input_shape != graph_.input_shape())
    throw ValidationError("test inputs " + test.input_shape.str() + " do not match the model input " +
                          graph_.input_shape().str());
  if (test.num_classes > num_classes_) throw ValidationError("test set has more classes than the head");
  EvalResult r;
  r.predictions.assign(static_cast<size_t>(test.size()), 0);
  std::vector<int64_t> all(static_cast<size_t>(test.size()));
  for (int64_t i = 0; i < test.size(); ++i) all[i] = i;
  const auto chunks = chunks_of(all, kChunk);
  parallel_chunks(static_cast<int64_t>(chunks.size()), [&](int64_t c) {
    const auto pred = argmax_rows(head_.predict(features(test.batch(chunks[c]))));
    for (size_t j = 0; j < pred.size(); ++j) r.predictions[chunks[c][j]] = pred[j];
  });
  r.class_correct.assign(static_cast<size_t>(num_classes_), 0);
  r.class_total.assign(static_cast<size_t>(num_classes_), 0);
  int64_t correct = 0;
  for (int64_t i = 0; i < test.size(); ++i) {
    ++r.class_total[test.labels[i]];
    if (r.predictions[i] == test.labels[i]) {
      ++correct;
      ++r.class_correct[test.labels[i]];
    }
  }
  r.accuracy = test.size() ? static_cast<double>(correct) / static_cast<double>(test.size()) : 0.0;
  return r;
}

std::vector<LatentSample> ContinualLearner::latents(const Dataset& ds, const std::vector<int64_t>& indices) const {
  std::vector<LatentSample> out(indices.size());
  const auto chunks = chunks_of(indices, kChunk);
  parallel_chunks(static_cast<int64_t>(chunks.size()), [&](int64_t c) {
    const Tensor z = graph_.forward(ds.batch(chunks[c]), Mode::infer, nullptr, 0, replay_level_);
    const Shape per = z.shape.drop_batch();
    const int64_t n = per.numel();
    for (size_t j = 0; j < chunks[c].size(); ++j) {
      BitTensor b(per);
      for (int64_t i = 0; i < n; ++i)
        if (z[static_cast<int64_t>(j) * n + i] >= 0.0) b.set(i, true);
      out[c * kChunk + j] = LatentSample{std::move(b), ds.labels[chunks[c][j]]};
    }
  });
  return out;
}

MetricsLog ContinualLearner::run_protocol(const Dataset& train, const Dataset& test) {
  if (train.input_shape != graph_.input_shape()) throw ValidationError("training inputs do not match the model");
  const auto stream = make_nc_stream(train, cfg_.num_experiences, cfg_.seed);
  MetricsLog log;
  log.test_set_sha256 = dataset_sha256(test);
  const double loss = pretrain_float(train, stream[0]);
  log.rows.push_back(deploy(train, stream[0], test, loss));
  for (size_t e = 1; e < stream.size(); ++e) log.rows.push_back(run_experience(train, stream[e], test));
  if (dataset_sha256(test) != log.test_set_sha256) throw std::runtime_error("the test set changed during the run");
  return log;
}

namespace {

constexpr std::string_view kCheckpointMagic = "BRCK";
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void ContinualLearner::save_checkpoint(const std::filesystem::path& path) const {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  graph_.write(w);
  head_.write(w);
  write_file_atomic(path, w.buffer());
}

ContinualLearner ContinualLearner::load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic, "checkpoint");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Graph g = Graph::read(r);
  CwrHead head = CwrHead::read(r);
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
  ContinualConfig cfg;
  cfg.bits = g.bitwidths();
  const int classes = static_cast<int>(head.num_classes());
  ContinualLearner learner(std::move(g), cfg, classes);
  if (head.feature_dim() != learner.head_.feature_dim()) throw FormatError("head does not match the model features");
  learner.head_ = std::move(head);
  return learner;
}

}  // namespace binreplay
