#include "kwcap/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "kwcap/errors.hpp"
#include "kwcap/metrics.hpp"

namespace kwcap {

namespace {

AdamConfig adam_from(const HyperConfig& c, double lr) { return AdamConfig{lr, c.beta1, c.beta2, c.eps}; }

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng(seed).fork(epoch);
  rng.shuffle(std::span<std::size_t>(idx));
  return idx;
}

// Shared epoch/batch loop. `batch_loss` records the batch on the tape and
// returns the scalar to minimise with the value to log.
template <typename BatchLoss>
TrainResult run_loop(CaptionModel& model, std::span<const Example> train, std::size_t epochs, double lr,
                     std::uint64_t seed_stream, BatchLoss&& batch_loss, const ProgressFn& progress) {
  const HyperConfig& cfg = model.config();
  if (train.empty()) throw ContractError("training split is empty");
  AdamState state;
  AdamConfig adam = adam_from(cfg, lr);
  TrainResult result;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    auto order = epoch_order(train.size(), cfg.seed ^ seed_stream, epoch);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      if (cfg.max_steps && result.steps >= cfg.max_steps) return result;
      std::size_t end = std::min(order.size(), start + cfg.batch);
      Tape tape;
      Binder bind(tape, model.params(), true);
      Rng drop_rng = Rng(cfg.seed).fork(0x100000000ULL + result.steps);
      auto [loss, logged] = batch_loss(bind, std::span<const std::size_t>(order).subspan(start, end - start), drop_rng);
      ParamGrads grads = bind.gradients(tape.backward(loss));
      clip_global_norm(grads, cfg.clip_norm);
      adam_step(model.params(), grads, state, adam);
      ++result.steps;
      result.losses.push_back(logged);
      if (progress) progress(result.steps, logged);
    }
  }
  return result;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}
void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

struct Reader {
  std::istream& in;
  std::string path;
  void read(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in) throw DataError(path + ": truncated checkpoint");
  }
  std::uint64_t uint(int bytes) {
    unsigned char b[8];
    read(b, static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
};

}  // namespace

void adam_step(ParamStore& params, const ParamGrads& grads, AdamState& state, const AdamConfig& h) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw ContractError("adam_step: gradient for unknown parameter '" + name + "'");
    if (params.get(name).shape() != g.shape())
      throw ContractError("adam_step: gradient of '" + name + "' has shape " + shape_string(g.shape()) +
                          ", parameter has " + shape_string(params.get(name).shape()));
  }
  ++state.t;
  double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.get(name);
    auto [mi, m_new] = state.m.try_emplace(name, Tensor::zeros(p.shape()));
    auto [vi, v_new] = state.v.try_emplace(name, Tensor::zeros(p.shape()));
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    if (m.shape() != p.shape() || v.shape() != p.shape())
      throw ContractError("adam_step: optimizer state of '" + name + "' does not match the parameter");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      double m_hat = m[i] / bc1;
      double v_hat = v[i] / bc2;
      p[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

double clip_global_norm(ParamGrads& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.data()) sq += x * x;
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    double s = max_norm / norm;
    for (auto& [name, g] : grads) g *= s;
  }
  return norm;
}

TrainResult train_captioner(CaptionModel& model, std::span<const Example> train, const ProgressFn& progress) {
  const HyperConfig& cfg = model.config();
  auto batch = [&](Binder& bind, std::span<const std::size_t> idx, Rng& rng) {
    Var total;
    std::size_t tokens = 0;
    for (std::size_t i : idx) {
      auto l = model.caption_loss(bind, train[i], Mode::Train, &rng);
      total = total.valid() ? add(total, l.nll) : l.nll;
      tokens += l.tokens;
    }
    Var loss = scale(total, 1.0 / static_cast<double>(tokens));
    return std::pair<Var, double>{loss, loss.value()[0]};
  };
  return run_loop(model, train, cfg.epochs, cfg.lr, 0, batch, progress);
}

TrainResult train_heads(CaptionModel& model, std::span<const Example> train, const ProgressFn& progress) {
  const HyperConfig& cfg = model.config();
  auto batch = [&](Binder& bind, std::span<const std::size_t> idx, Rng&) {
    Var total;
    for (std::size_t i : idx) {
      Var l = model.classifier_loss(bind, train[i]);
      if (!model.keyword_labels().empty()) l = add(l, model.keyword_predictor_loss(bind, train[i]));
      total = total.valid() ? add(total, l) : l;
    }
    Var loss = scale(total, 1.0 / static_cast<double>(idx.size()));
    return std::pair<Var, double>{loss, loss.value()[0]};
  };
  return run_loop(model, train, cfg.predictor_epochs, cfg.predictor_lr, 0x6865616473ULL, batch, progress);
}

double evaluate_loss(const CaptionModel& model, std::span<const Example> examples) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    Tape tape;
    Binder bind(tape, model.params(), false);
    auto l = model.caption_loss(bind, ex, Mode::Eval);
    nll += l.nll.value()[0];
    tokens += l.tokens;
  }
  return tokens ? nll / static_cast<double>(tokens) : 0.0;
}

void save_checkpoint(const std::filesystem::path& path, const CaptionModel& model, std::size_t step) {
  nlohmann::json meta;
  meta["config"] = nlohmann::json::parse(model.config().to_json());
  meta["vocab"] = model.vocab().tokens();
  meta["keyword_labels"] = model.keyword_labels();
  meta["classes"] = model.classes();
  std::string meta_text = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write("KWCK", 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, meta_text.size());
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  put_u64(out, step);
  put_u64(out, model.params().size());
  for (const auto& [name, t] : model.params()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double x : t.data()) put_f64(out, x);
  }
  if (!out) throw DataError("error writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r{in, path.string()};
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "KWCK", 4) != 0) throw DataError(path.string() + ": not a kwcap checkpoint");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  std::string meta_text(r.u64(), '\0');
  r.read(meta_text.data(), meta_text.size());
  Checkpoint ck;
  try {
    auto meta = nlohmann::json::parse(meta_text);
    ck.config = HyperConfig::from_json(meta.at("config").dump());
    ck.vocab = Vocabulary::from_tokens(meta.at("vocab").get<std::vector<std::string>>());
    ck.keyword_labels = meta.at("keyword_labels").get<std::vector<std::string>>();
    ck.classes = meta.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint metadata: " + e.what());
  }
  ck.step = r.u64();
  std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(r.u32(), '\0');
    r.read(name.data(), name.size());
    std::uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(shape_size(shape));
    for (double& x : values) x = r.f64();
    ck.params.add(name, Tensor(shape, std::move(values)));
  }
  return ck;
}

CaptionModel model_from_checkpoint(Checkpoint ck) {
  return CaptionModel(std::move(ck.config), std::move(ck.vocab), std::move(ck.keyword_labels), ck.classes,
                      std::move(ck.params));
}

void write_loss_csv(const std::filesystem::path& path, std::span<const double> losses) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << (i + 1) << ',' << format_double(losses[i]) << '\n';
}

}  // namespace kwcap
