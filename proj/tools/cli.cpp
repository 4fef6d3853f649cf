#include "cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "kwcap/datasynth.hpp"
#include "kwcap/errors.hpp"
#include "kwcap/metrics.hpp"
#include "kwcap/trainer.hpp"

namespace kwcap::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kManifest = "manifest.json";

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
  if (!out) throw DataError("error writing " + p.string());
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

fs::path absolute(const std::string& p) { return fs::weakly_canonical(fs::absolute(p)); }

// --- configuration ----------------------------------------------------------

struct ConfigOptions {
  std::string preset = "desk";
  std::string file;
  std::string inline_json;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "Base preset: desk, lstm or coattention")->capture_default_str();
    cmd->add_option("--config", file, "HyperConfig JSON file; keys override the preset");
    cmd->add_option("--config-json", inline_json, "HyperConfig JSON text, applied after --config")->group("");
    cmd->add_option("--set", sets, "key=value override, applied last (repeatable)");
  }

  HyperConfig resolve() const {
    HyperConfig c = HyperConfig::preset(preset);
    if (!file.empty()) c = HyperConfig::from_json(read_text(file), c);
    if (!inline_json.empty()) c = HyperConfig::from_json(inline_json, c);
    for (const auto& kv : sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
      std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      json v = json::parse(value, nullptr, false);
      if (v.is_discarded()) v = value;  // bare words are strings
      c = HyperConfig::from_json(json{{key, v}}.dump(), c);
    }
    c.validate();
    return c;
  }
};

// --- manifests ----------------------------------------------------------------

// Every file under `dir` except the manifest, keyed by relative path.
std::map<std::string, std::string> hash_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kManifest || rel.ends_with(".tmp")) continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

// `argv` is the normalised command line without --out; rerun appends one.
void write_manifest(const fs::path& dir, const std::vector<std::string>& argv, const std::vector<fs::path>& inputs,
                    const std::optional<HyperConfig>& cfg) {
  json m;
  m["tool"] = "kwcap";
  m["argv"] = argv;
  json in = json::object();
  for (const auto& p : inputs) in[p.string()] = sha256_file(p);
  m["inputs"] = in;
  if (cfg) {
    m["config"] = json::parse(cfg->to_json());
    m["seed"] = cfg->seed;
  }
  m["outputs"] = hash_outputs(dir);
  // rename is atomic within a directory
  fs::path tmp = dir / (std::string(kManifest) + ".tmp");
  write_text(tmp, m.dump(2) + "\n");
  fs::rename(tmp, dir / kManifest);
}

// --- data ---------------------------------------------------------------------

struct Dataset {
  std::vector<Record> records;
  Splits splits;
  fs::path data_path, splits_path;  // splits_path empty when derived from the config
};

Dataset load_dataset(const std::string& data, const std::string& splits, const HyperConfig& cfg) {
  Dataset d;
  d.data_path = absolute(data);
  d.records = load_jsonl(d.data_path);
  if (d.records.empty()) throw DataError(data + ": no records");
  if (!splits.empty()) {
    d.splits_path = absolute(splits);
    d.splits = load_splits(d.splits_path);
    for (const auto* part : {&d.splits.train, &d.splits.val, &d.splits.test})
      for (std::size_t i : *part)
        if (i >= d.records.size())
          throw DataError(splits + ": index " + std::to_string(i) + " out of range for " +
                          std::to_string(d.records.size()) + " records");
  } else {
    d.splits = split_indices(d.records.size(), cfg.split, cfg.seed);
  }
  return d;
}

std::vector<std::size_t> subset(const Dataset& d, const std::string& name) {
  if (name == "train") return d.splits.train;
  if (name == "val") return d.splits.val;
  if (name == "test") return d.splits.test;
  if (name == "all") {
    std::vector<std::size_t> all(d.records.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  throw ConfigError("--subset must be train, val, test or all, got '" + name + "'");
}

std::vector<Record> pick(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<Record> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(d.records[i]);
  return out;
}

void add_data_args(std::vector<std::string>& argv, std::vector<fs::path>& inputs, const Dataset& d) {
  argv.insert(argv.end(), {"--data", d.data_path.string()});
  inputs.push_back(d.data_path);
  if (!d.splits_path.empty()) {
    argv.insert(argv.end(), {"--splits", d.splits_path.string()});
    inputs.push_back(d.splits_path);
  }
}

Example prepare_for(const CaptionModel& model, const Record& r, KeywordSource source) {
  Example ex = model.prepare(r);
  if (source == KeywordSource::Predicted) ex = model.with_keywords(std::move(ex), model.predict_keywords(ex));
  return ex;
}

// --- attention heatmaps -------------------------------------------------------

void write_pgm(const fs::path& path, std::size_t rows, std::size_t cols, const std::vector<int>& px) {
  std::string s = "P2\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c) s += ' ';
      s += std::to_string(px[r * cols + c]);
    }
    s += '\n';
  }
  write_text(path, s);
}

// One PGM per generated token. Weights are scaled by the row maximum, which
// the index records so the map can be turned back into weights.
void export_heatmaps(const CaptionModel& model, const Example& ex, std::span<const TokenId> tokens,
                     const fs::path& dir) {
  Tensor attn = model.cross_attention(ex, tokens);
  // patches are Nx(P*P) in raster order of the patch grid
  std::size_t cells = ex.patches.rows();
  std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(cells))));
  if (attn.cols() != cells)
    throw ContractError("attention export needs one decoder memory row per image patch (coattention fusion); "
                        "this model attends over " +
                        std::to_string(attn.cols()) + " memory rows for " + std::to_string(cells) + " patches");
  if (side * side != cells) throw ContractError("attention export needs a square patch grid");
  fs::create_directories(dir);
  std::string index = "step\ttoken\tfile\tscale\n";
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    double mx = 0;
    for (std::size_t j = 0; j < cells; ++j) mx = std::max(mx, attn.at(t, j));
    std::vector<int> px(cells);
    for (std::size_t j = 0; j < cells; ++j)
      px[j] = mx > 0 ? static_cast<int>(std::lround(255.0 * attn.at(t, j) / mx)) : 0;
    char name[32];
    std::snprintf(name, sizeof name, "step_%03zu.pgm", t);
    write_pgm(dir / name, side, side, px);
    index += std::to_string(t) + "\t" + model.vocab().token(tokens[t]) + "\t" + name + "\t" + format_double(mx) + "\n";
  }
  write_text(dir / "index.tsv", index);
}

// --- commands -----------------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
};

int cmd_synth(Context& io, std::uint64_t seed, std::size_t n, const std::string& split, const fs::path& dir) {
  SplitSpec spec;
  if (split == "60-20-20") spec = SplitSpec::sixty_twenty_twenty();
  else if (split == "80-10-10") spec = SplitSpec::eighty_ten_ten();
  else throw ConfigError("--split must be 60-20-20 or 80-10-10, got '" + split + "'");
  SynthSpec s;
  s.seed = seed;
  s.n_records = n;
  auto recs = generate(s);
  fs::create_directories(dir);
  save_jsonl(dir / "data.jsonl", recs);
  save_splits(dir / "splits.txt", split_indices(recs.size(), spec, seed));
  write_manifest(dir,
                 {"synth-data", "--seed", std::to_string(seed), "--n", std::to_string(n), "--split", split}, {},
                 std::nullopt);
  io.out << "wrote " << recs.size() << " records to " << (dir / "data.jsonl").string() << "\n";
  return kOk;
}

int cmd_train(Context& io, const ConfigOptions& co, const std::string& data, const std::string& splits,
              bool no_heads, const fs::path& dir) {
  HyperConfig cfg = co.resolve();
  Dataset d = load_dataset(data, splits, cfg);
  auto train = pick(d, d.splits.train);
  if (train.empty()) throw ContractError("training split is empty");
  CaptionModel model = CaptionModel::from_records(cfg, train);
  std::vector<Example> ex;
  ex.reserve(train.size());
  for (const auto& r : train) ex.push_back(model.prepare(r));
  auto t0 = std::chrono::steady_clock::now();
  TrainResult res = train_captioner(model, ex, [&](std::size_t step, double loss) {
    if (step % 50 == 0) io.out << "step " << step << " loss " << loss << "\n";
  });
  fs::create_directories(dir);
  write_loss_csv(dir / "loss.csv", res.losses);
  if (!no_heads) {
    TrainResult h = train_heads(model, ex);
    write_loss_csv(dir / "heads_loss.csv", h.losses);
  }
  save_checkpoint(dir / "model.kwck", model, res.steps);
  write_text(dir / "config.json", cfg.to_json() + "\n");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io.out << "trained " << res.steps << " steps in " << secs << " s, final loss "
         << (res.losses.empty() ? 0.0 : res.losses.back()) << "\n";
  if (!d.splits.val.empty()) {
    auto val = pick(d, d.splits.val);
    std::vector<Example> vex;
    for (const auto& r : val) vex.push_back(model.prepare(r));
    io.out << "validation loss " << evaluate_loss(model, vex) << "\n";
  }
  std::vector<std::string> argv{"train", "--config-json", cfg.to_json()};
  std::vector<fs::path> inputs;
  add_data_args(argv, inputs, d);
  if (no_heads) argv.push_back("--no-heads");
  write_manifest(dir, argv, inputs, cfg);
  return kOk;
}

struct GenerateOptions {
  std::string ckpt, data, splits, subset_name;
  std::size_t beam = 0;
  std::string keywords;
  bool report = false, attention = false;
  std::size_t limit = 0;
};

int cmd_generate(Context& io, const GenerateOptions& o, const fs::path& dir) {
  fs::path ckpt_path = absolute(o.ckpt);
  CaptionModel model = model_from_checkpoint(load_checkpoint(ckpt_path));
  const HyperConfig& cfg = model.config();
  std::size_t beam = o.beam ? o.beam : cfg.beam;
  KeywordSource source = o.keywords.empty() ? cfg.keywords : parse_keyword_source(o.keywords);
  Dataset d = load_dataset(o.data, o.splits, cfg);
  std::string sub = o.subset_name.empty() ? (d.splits_path.empty() ? "all" : "test") : o.subset_name;
  auto idx = subset(d, sub);
  if (o.limit && idx.size() > o.limit) idx.resize(o.limit);
  if (idx.empty()) throw ContractError("subset '" + sub + "' is empty");
  if (o.attention && !o.report) throw ConfigError("--attention is written into the reports; add --report");

  fs::create_directories(dir);
  std::string captions, refs, classes;
  const auto& names = disease_names();
  std::size_t top = std::min<std::size_t>(5, model.classes());
  for (std::size_t i : idx) {
    const Record& r = d.records[i];
    Example ex = prepare_for(model, r, source);
    SearchResult sr = model.generate(ex, beam);
    std::string caption = model.caption(sr);
    captions += caption + "\n";
    refs += r.description + "\n";
    auto ranked = model.classify(ex);
    classes += std::to_string(i) + " " + std::to_string(r.disease);
    for (std::size_t k = 0; k < top; ++k) classes += " " + std::to_string(ranked[k].id);
    classes += "\n";
    if (o.report) {
      json rep;
      rep["record"] = i;
      json preds = json::array();
      for (std::size_t k = 0; k < top; ++k) {
        std::size_t id = ranked[k].id;
        preds.push_back({{"class", id}, {"name", id < names.size() ? names[id] : std::to_string(id)},
                         {"score", ranked[k].score}});
      }
      rep["disease_top5"] = preds;
      rep["keywords"] = ex.keywords;
      rep["keyword_source"] = source == KeywordSource::Predicted ? "pseudo" : "expert";
      rep["description"] = caption;
      rep["attention"] = nullptr;
      fs::create_directories(dir / "reports");
      char name[32];
      std::snprintf(name, sizeof name, "record_%05zu", i);
      if (o.attention) {
        export_heatmaps(model, ex, sr.tokens, dir / "attention" / name);
        rep["attention"] = (fs::path("attention") / name / "index.tsv").generic_string();
      }
      write_text(dir / "reports" / (std::string(name) + ".json"), rep.dump(2) + "\n");
    }
  }
  write_text(dir / "captions.txt", captions);
  write_text(dir / "references.txt", refs);
  write_text(dir / "classes.txt", classes);

  std::vector<std::string> argv{"generate", "--ckpt", ckpt_path.string(), "--beam", std::to_string(beam),
                                "--keywords", std::string(to_string(source)), "--subset", sub};
  std::vector<fs::path> inputs{ckpt_path};
  add_data_args(argv, inputs, d);
  if (o.limit) argv.insert(argv.end(), {"--limit", std::to_string(o.limit)});
  if (o.report) argv.push_back("--report");
  if (o.attention) argv.push_back("--attention");
  write_manifest(dir, argv, inputs, cfg);
  io.out << "generated " << idx.size() << " captions (beam " << beam << ", " << to_string(source)
         << " keywords)\n";
  return kOk;
}

std::vector<Sentence> read_sentences(const fs::path& p) {
  std::vector<Sentence> out;
  for (const auto& line : read_lines(p)) out.push_back(preprocess(line));
  return out;
}

int cmd_evaluate(Context& io, const std::string& cand, const std::string& ref, const std::string& classes,
                 const std::string& corpus, const fs::path& dir) {
  fs::path cp = absolute(cand), rp = absolute(ref);
  auto c = read_sentences(cp), r = read_sentences(rp);
  if (c.size() != r.size())
    throw DataError(cand + " has " + std::to_string(c.size()) + " lines but " + ref + " has " +
                    std::to_string(r.size()));
  MetricReport m = evaluate_corpus(c, r);
  m.corpus = corpus;
  std::vector<std::string> argv{"evaluate", "--cand", cp.string(), "--ref", rp.string()};
  std::vector<fs::path> inputs{cp, rp};
  if (!corpus.empty()) argv.insert(argv.end(), {"--corpus", corpus});
  if (!classes.empty()) {
    fs::path kp = absolute(classes);
    std::vector<std::vector<std::size_t>> rankings;
    std::vector<std::size_t> gold;
    std::size_t n = 0;
    for (const auto& line : read_lines(kp)) {
      ++n;
      std::istringstream in(line);
      std::size_t record, g;
      if (!(in >> record >> g)) throw DataError(classes + ":" + std::to_string(n) + ": expected record and gold ids");
      std::vector<std::size_t> ranked;
      for (std::size_t id; in >> id;) ranked.push_back(id);
      gold.push_back(g);
      rankings.push_back(std::move(ranked));
    }
    if (!rankings.empty()) {
      std::size_t depth = rankings.front().size();
      m.prec_at_1 = prec_at_k(rankings, gold, 1);
      m.prec_at_5 = prec_at_k(rankings, gold, std::min<std::size_t>(5, depth));
    }
    argv.insert(argv.end(), {"--classes", kp.string()});
    inputs.push_back(kp);
  }
  fs::create_directories(dir);
  write_text(dir / "metrics.txt", m.to_text());
  write_manifest(dir, argv, inputs, std::nullopt);
  io.out << m.to_text();
  return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_ablate(Context& io, const ConfigOptions& co, const std::string& data, const std::string& splits,
               const std::string& fusions, const std::string& modalities, const std::string& decoders,
               const std::string& beams, const std::string& sub, const fs::path& dir) {
  HyperConfig base = co.resolve();
  Dataset d = load_dataset(data, splits, base);
  auto train = pick(d, d.splits.train);
  auto eval_idx = subset(d, sub);
  if (train.empty()) throw ContractError("training split is empty");
  if (eval_idx.empty()) throw ContractError("subset '" + sub + "' is empty");
  std::vector<FusionStrategy> fs_list;
  for (const auto& f : split_list(fusions)) fs_list.push_back(parse_fusion(f));
  std::vector<Modality> mod_list;
  for (const auto& m : split_list(modalities)) mod_list.push_back(parse_modality(m));
  std::vector<DecoderKind> dec_list;
  if (decoders.empty()) dec_list.push_back(base.decoder);
  for (const auto& x : split_list(decoders)) dec_list.push_back(parse_decoder(x));
  std::vector<std::size_t> beam_list;
  for (const auto& b : split_list(beams)) {
    std::size_t k = 0;
    auto [p, ec] = std::from_chars(b.data(), b.data() + b.size(), k);
    if (ec != std::errc() || p != b.data() + b.size() || k == 0) throw ConfigError("--beams: bad width '" + b + "'");
    beam_list.push_back(k);
  }
  if (fs_list.empty() || mod_list.empty() || beam_list.empty()) throw ConfigError("ablate: empty axis");

  std::string csv = "fusion,modality,decoder,beam,bleu_1,bleu_2,bleu_3,bleu_4,bleu_avg,cider,rouge_l,meteor\n";
  std::vector<Sentence> refs;
  for (std::size_t i : eval_idx) refs.push_back(preprocess(d.records[i].description));
  for (DecoderKind dec : dec_list)
    for (FusionStrategy fusion : fs_list)
      for (Modality mod : mod_list) {
        HyperConfig cfg = base;
        cfg.decoder = dec;
        cfg.fusion = fusion;
        cfg.modality = mod;
        cfg.validate();
        auto t0 = std::chrono::steady_clock::now();
        CaptionModel model = CaptionModel::from_records(cfg, train);
        std::vector<Example> ex;
        for (const auto& r : train) ex.push_back(model.prepare(r));
        TrainResult res = train_captioner(model, ex);
        std::vector<Example> eval_ex;
        for (std::size_t i : eval_idx) eval_ex.push_back(prepare_for(model, d.records[i], cfg.keywords));
        for (std::size_t k : beam_list) {
          std::vector<Sentence> cands;
          for (const auto& e : eval_ex) cands.push_back(preprocess(model.caption(model.generate(e, k))));
          MetricReport m = evaluate_corpus(cands, refs);
          csv += std::string(to_string(fusion)) + "," + std::string(to_string(mod)) + "," +
                 std::string(to_string(dec)) + "," + std::to_string(k);
          for (double v : {m.bleu_1, m.bleu_2, m.bleu_3, m.bleu_4, m.bleu_avg, m.cider, m.rouge_l, m.meteor})
            csv += "," + format_double(v);
          csv += "\n";
          io.out << to_string(fusion) << " " << to_string(mod) << " " << to_string(dec) << " beam " << k
                 << " bleu_avg " << m.bleu_avg << "\n";
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        io.out << "  cell done: " << res.steps << " steps, final loss "
               << (res.losses.empty() ? 0.0 : res.losses.back()) << ", " << secs << " s\n";
      }
  fs::create_directories(dir);
  write_text(dir / "ablation.csv", csv);
  std::vector<std::string> argv{"ablate",      "--config-json", base.to_json(), "--fusions", fusions,
                                "--modalities", modalities,     "--beams",      beams,       "--subset", sub};
  if (!decoders.empty()) argv.insert(argv.end(), {"--decoders", decoders});
  std::vector<fs::path> inputs;
  add_data_args(argv, inputs, d);
  write_manifest(dir, argv, inputs, base);
  return kOk;
}

int cmd_export(Context& io, const std::string& ckpt, const std::string& data, std::size_t record, std::size_t beam,
               const fs::path& dir) {
  fs::path cp = absolute(ckpt), dp = absolute(data);
  CaptionModel model = model_from_checkpoint(load_checkpoint(cp));
  auto recs = load_jsonl(dp);
  if (record >= recs.size())
    throw DataError(data + ": no record " + std::to_string(record) + " (" + std::to_string(recs.size()) +
                    " records)");
  if (model.config().decoder != DecoderKind::Transformer)
    throw ContractError("attention export needs a transformer decoder; this checkpoint uses an LSTM");
  Example ex = prepare_for(model, recs[record], model.config().keywords);
  SearchResult sr = model.generate(ex, beam);
  export_heatmaps(model, ex, sr.tokens, dir);
  write_text(dir / "caption.txt", model.caption(sr) + "\n");
  write_manifest(dir,
                 {"export-attention", "--ckpt", cp.string(), "--data", dp.string(), "--record",
                  std::to_string(record), "--beam", std::to_string(beam)},
                 {cp, dp}, model.config());
  io.out << "wrote " << sr.tokens.size() << " heatmaps to " << dir.string() << "\n";
  return kOk;
}

int cmd_rerun(Context& io, const std::string& manifest, const fs::path& dir) {
  json m;
  try {
    m = json::parse(read_text(manifest));
  } catch (const json::parse_error& e) {
    throw DataError(manifest + ": " + e.what());
  }
  if (!m.contains("argv") || !m.contains("outputs")) throw DataError(manifest + ": not a kwcap manifest");
  const json inputs = m.value("inputs", json::object());
  for (const auto& [path, hash] : inputs.items()) {
    if (!fs::exists(path)) throw DataError("input " + path + " named in the manifest is missing");
    if (sha256_file(path) != hash.get<std::string>()) throw DataError("input " + path + " changed since the run");
  }
  auto argv = m["argv"].get<std::vector<std::string>>();
  if (argv.empty() || argv[0] == "rerun") throw DataError(manifest + ": bad argv");
  argv.insert(argv.end(), {"--out", dir.string()});
  std::ostringstream sub_out;
  int code = run(argv, sub_out, io.err);
  if (code != kOk) return code;
  auto want = m["outputs"].get<std::map<std::string, std::string>>();
  auto got = hash_outputs(dir);
  std::size_t bad = 0;
  for (const auto& [name, hash] : want) {
    auto it = got.find(name);
    if (it == got.end()) {
      io.err << "missing output " << name << "\n";
      ++bad;
    } else if (it->second != hash) {
      io.err << "output differs: " << name << "\n";
      ++bad;
    }
  }
  for (const auto& [name, _] : got)
    if (!want.count(name)) {
      io.err << "unexpected output " << name << "\n";
      ++bad;
    }
  if (bad) {
    io.err << bad << " of " << want.size() << " outputs not reproduced\n";
    return kContractError;
  }
  io.out << "reproduced " << want.size() << " outputs bitwise\n";
  return kOk;
}

}  // namespace

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

Pgm read_pgm(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> tok;
  for (std::string line; std::getline(in, line);) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    for (std::string t; ls >> t;) tok.push_back(t);
  }
  if (tok.size() < 4 || tok[0] != "P2") throw DataError(path.string() + ": not a plain PGM");
  Pgm p;
  try {
    p.width = std::stoul(tok[1]);
    p.height = std::stoul(tok[2]);
    p.max_value = std::stoi(tok[3]);
    if (tok.size() != 4 + p.width * p.height) throw DataError(path.string() + ": wrong pixel count");
    for (std::size_t i = 4; i < tok.size(); ++i) p.pixels.push_back(std::stoi(tok[i]));
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed PGM");
  }
  return p;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Keyword-driven medical image captioning"};
  app.name("kwcap");
  app.require_subcommand(1);
  Context io{out, err};
  std::string out_dir;
  std::function<int()> action;

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset and its splits");
  std::uint64_t seed = 1;
  std::size_t n = 100;
  std::string split = "60-20-20";
  synth->add_option("--seed", seed)->capture_default_str();
  synth->add_option("--n", n, "Number of records")->capture_default_str();
  synth->add_option("--split", split, "60-20-20 or 80-10-10")->capture_default_str();
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->callback([&] { action = [&] { return cmd_synth(io, seed, n, split, out_dir); }; });

  auto* train = app.add_subcommand("train", "Train a captioning model");
  ConfigOptions train_cfg;
  train_cfg.attach(train);
  std::string data, splits;
  bool no_heads = false;
  train->add_option("--data", data, "Dataset JSONL")->required();
  train->add_option("--splits", splits, "Split file; derived from the config seed when absent");
  train->add_flag("--no-heads", no_heads, "Skip the keyword predictor and disease classifier");
  train->add_option("--out", out_dir, "Output directory")->required();
  train->callback([&] { action = [&] { return cmd_train(io, train_cfg, data, splits, no_heads, out_dir); }; });

  auto* gen = app.add_subcommand("generate", "Caption records with a trained model");
  GenerateOptions go;
  gen->add_option("--ckpt", go.ckpt, "Checkpoint")->required();
  gen->add_option("--data", go.data, "Dataset JSONL")->required();
  gen->add_option("--splits", go.splits, "Split file");
  gen->add_option("--subset", go.subset_name, "train, val, test or all (default test with splits, else all)");
  gen->add_option("--beam", go.beam, "Beam width (default from the checkpoint config)");
  gen->add_option("--keywords", go.keywords, "expert or predicted");
  gen->add_option("--limit", go.limit, "Caption at most this many records");
  gen->add_flag("--report", go.report, "Write one JSON report per record");
  gen->add_flag("--attention", go.attention, "Export attention heatmaps into the reports");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->callback([&] { action = [&] { return cmd_generate(io, go, out_dir); }; });

  auto* eval = app.add_subcommand("evaluate", "Score candidate captions against references");
  std::string cand, ref, classes, corpus;
  eval->add_option("--cand", cand, "Candidate captions, one per line")->required();
  eval->add_option("--ref", ref, "Reference descriptions, one per line")->required();
  eval->add_option("--classes", classes, "classes.txt from generate, for Prec@1 and Prec@5");
  eval->add_option("--corpus", corpus, "Label written into the report");
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->callback([&] { action = [&] { return cmd_evaluate(io, cand, ref, classes, corpus, out_dir); }; });

  auto* abl = app.add_subcommand("ablate", "Train and score every fusion x modality x decoder cell");
  ConfigOptions abl_cfg;
  abl_cfg.attach(abl);
  std::string fusions = "transfuser,sum,mul", modalities = "image+keywords,image,keywords", decoders, beams = "1,3";
  std::string abl_subset = "test";
  abl->add_option("--data", data, "Dataset JSONL")->required();
  abl->add_option("--splits", splits, "Split file");
  abl->add_option("--fusions", fusions, "Comma-separated fusion strategies")->capture_default_str();
  abl->add_option("--modalities", modalities, "Comma-separated input modalities")->capture_default_str();
  abl->add_option("--decoders", decoders, "Comma-separated decoders (default from the config)");
  abl->add_option("--beams", beams, "Comma-separated beam widths")->capture_default_str();
  abl->add_option("--subset", abl_subset, "Evaluation subset")->capture_default_str();
  abl->add_option("--out", out_dir, "Output directory")->required();
  abl->callback([&] {
    action = [&] {
      return cmd_ablate(io, abl_cfg, data, splits, fusions, modalities, decoders, beams, abl_subset, out_dir);
    };
  });

  auto* exp = app.add_subcommand("export-attention", "Write per-token patch attention heatmaps (PGM)");
  std::size_t record = 0, exp_beam = 1;
  exp->add_option("--ckpt", go.ckpt, "Checkpoint")->required();
  exp->add_option("--data", data, "Dataset JSONL")->required();
  exp->add_option("--record", record, "Record index in the dataset")->required();
  exp->add_option("--beam", exp_beam, "Beam width")->capture_default_str();
  exp->add_option("--out", out_dir, "Output directory")->required();
  exp->callback([&] { action = [&] { return cmd_export(io, go.ckpt, data, record, exp_beam, out_dir); }; });

  auto* rerun = app.add_subcommand("rerun", "Re-run a command from its manifest and compare outputs");
  std::string manifest;
  rerun->add_option("--manifest", manifest, "manifest.json of an earlier run")->required();
  rerun->add_option("--out", out_dir, "Output directory for the re-run")->required();
  rerun->callback([&] { action = [&] { return cmd_rerun(io, manifest, out_dir); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);  // --help
  } catch (const CLI::ParseError& e) {
    err << "kwcap: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    return action ? action() : kConfigError;
  } catch (const ConfigError& e) {
    err << "kwcap: config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "kwcap: data error: " << e.what() << "\n";
    return kDataError;
  } catch (const Error& e) {
    err << "kwcap: " << e.what() << "\n";
    return kContractError;
  } catch (const fs::filesystem_error& e) {
    err << "kwcap: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace kwcap::cli
