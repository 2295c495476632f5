#include "fedcp/config.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"

namespace fedcp {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw ConfigError("config: " + (path.empty() ? "top level" : path) + ": " + msg);
}

std::string sub(const std::string& path, const char* key) {
  return path.empty() ? std::string(key) : path + "." + key;
}

const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

const json& require(const json& obj, const std::string& path, const char* key) {
  const json* j = find(obj, key);
  if (!j) fail(sub(path, key), "required key missing");
  return *j;
}

void check_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an object");
}

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed,
                const std::string& why = "unknown key") {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) fail(sub(path, it.key().c_str()), why);
  }
}

std::string get_string(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path, "expected a string");
  return j.get<std::string>();
}

double get_number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

std::int64_t get_integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) fail(path, "expected an integer");
  return j.get<std::int64_t>();
}

std::size_t get_count(const json& j, const std::string& path,
                      std::int64_t min_value) {
  std::int64_t v = get_integer(j, path);
  if (v < min_value) fail(path, "must be >= " + std::to_string(min_value));
  return static_cast<std::size_t>(v);
}

DatasetConfig parse_dataset(const json& j) {
  const std::string path = "dataset";
  check_object(j, path);
  check_keys(j, path,
             {"source", "images", "labels", "classes", "dim", "per_class",
              "spread"});
  DatasetConfig d;
  const std::string source = get_string(require(j, path, "source"), sub(path, "source"));
  if (source == "synthetic") {
    d.source = DatasetConfig::Source::synthetic;
    check_keys(j, path, {"source", "classes", "dim", "per_class", "spread"},
               "not a synthetic-source key");
    d.classes = get_count(require(j, path, "classes"), sub(path, "classes"), 1);
    d.dim = get_count(require(j, path, "dim"), sub(path, "dim"), 1);
    d.per_class =
        get_count(require(j, path, "per_class"), sub(path, "per_class"), 1);
    d.spread = get_number(require(j, path, "spread"), sub(path, "spread"));
    if (!(d.spread > 0.0)) fail(sub(path, "spread"), "must be > 0");
  } else if (source == "idx") {
    d.source = DatasetConfig::Source::idx;
    check_keys(j, path, {"source", "images", "labels"}, "not an idx-source key");
    d.images_path = get_string(require(j, path, "images"), sub(path, "images"));
    d.labels_path = get_string(require(j, path, "labels"), sub(path, "labels"));
    if (d.images_path.empty()) fail(sub(path, "images"), "must not be empty");
    if (d.labels_path.empty()) fail(sub(path, "labels"), "must not be empty");
  } else {
    fail(sub(path, "source"), "expected \"synthetic\" or \"idx\"");
  }
  return d;
}

PartitionConfig parse_partition(const json& j) {
  const std::string path = "partition";
  check_object(j, path);
  check_keys(j, path,
             {"scheme", "num_clients", "beta", "classes_per_client",
              "min_samples"});
  PartitionConfig p;
  const std::string scheme =
      get_string(require(j, path, "scheme"), sub(path, "scheme"));
  p.num_clients =
      get_count(require(j, path, "num_clients"), sub(path, "num_clients"), 1);
  if (const json* ms = find(j, "min_samples"))
    p.min_samples = get_count(*ms, sub(path, "min_samples"), 1);
  if (scheme == "dirichlet") {
    p.scheme = PartitionPlan::Scheme::dirichlet;
    check_keys(j, path, {"scheme", "num_clients", "beta", "min_samples"},
               "not a dirichlet-scheme key");
    p.beta = get_number(require(j, path, "beta"), sub(path, "beta"));
    if (!(p.beta > 0.0)) fail(sub(path, "beta"), "must be > 0");
  } else if (scheme == "pathological") {
    p.scheme = PartitionPlan::Scheme::pathological;
    check_keys(j, path,
               {"scheme", "num_clients", "classes_per_client", "min_samples"},
               "not a pathological-scheme key");
    p.classes_per_client = get_count(require(j, path, "classes_per_client"),
                                     sub(path, "classes_per_client"), 1);
  } else {
    fail(sub(path, "scheme"), "expected \"pathological\" or \"dirichlet\"");
  }
  return p;
}

NetSpec parse_model(const json& j) {
  const std::string path = "model";
  check_object(j, path);
  check_keys(j, path, {"input_dim", "classes", "hidden", "feature_dim", "cpn"});
  NetSpec m;
  m.hidden = {64};
  if (const json* d = find(j, "input_dim"))
    m.input_dim = get_count(*d, sub(path, "input_dim"), 1);
  if (const json* c = find(j, "classes"))
    m.num_classes = get_count(*c, sub(path, "classes"), 1);
  m.feature_dim =
      get_count(require(j, path, "feature_dim"), sub(path, "feature_dim"), 1);
  if (const json* h = find(j, "hidden")) {
    if (!h->is_array()) fail(sub(path, "hidden"), "expected an array of widths");
    m.hidden.clear();
    for (const json& w : *h)
      m.hidden.push_back(get_count(w, sub(path, "hidden"), 1));
  }
  if (const json* c = find(j, "cpn")) {
    const std::string cpath = sub(path, "cpn");
    check_object(*c, cpath);
    check_keys(*c, cpath, {"activation", "norm"});
    if (const json* a = find(*c, "activation")) {
      const std::string v = get_string(*a, sub(cpath, "activation"));
      if (v == "relu")
        m.cpn_activation = CpnActivation::relu;
      else if (v == "tanh")
        m.cpn_activation = CpnActivation::tanh;
      else if (v == "sigmoid")
        m.cpn_activation = CpnActivation::sigmoid;
      else
        fail(sub(cpath, "activation"),
             "expected \"relu\", \"tanh\" or \"sigmoid\"");
    }
    if (const json* n = find(*c, "norm")) {
      const std::string v = get_string(*n, sub(cpath, "norm"));
      if (v == "layer_norm")
        m.cpn_norm = CpnNorm::layer_norm;
      else if (v == "none")
        m.cpn_norm = CpnNorm::none;
      else
        fail(sub(cpath, "norm"), "expected \"layer_norm\" or \"none\"");
    }
  }
  return m;
}

TrainingConfig parse_training(const json& j) {
  const std::string path = "training";
  check_object(j, path);
  check_keys(j, path, {"rounds", "rho", "lr", "lambda", "epochs", "batch_size"});
  TrainingConfig t;
  t.rounds = static_cast<int>(
      get_count(require(j, path, "rounds"), sub(path, "rounds"), 1));
  t.lr = get_number(require(j, path, "lr"), sub(path, "lr"));
  if (!(t.lr > 0.0)) fail(sub(path, "lr"), "must be > 0");
  if (const json* l = find(j, "lambda")) {
    t.lambda = get_number(*l, sub(path, "lambda"));
    if (t.lambda < 0.0) fail(sub(path, "lambda"), "must be >= 0");
  }
  if (const json* e = find(j, "epochs"))
    t.epochs = static_cast<int>(get_count(*e, sub(path, "epochs"), 1));
  if (const json* b = find(j, "batch_size"))
    t.batch_size = static_cast<int>(get_count(*b, sub(path, "batch_size"), 1));
  if (const json* r = find(j, "rho")) {
    const std::string rpath = sub(path, "rho");
    if (r->is_number()) {
      t.rho.lo = t.rho.hi = get_number(*r, rpath);
    } else if (r->is_array() && r->size() == 2) {
      t.rho.lo = get_number((*r)[0], rpath);
      t.rho.hi = get_number((*r)[1], rpath);
    } else {
      fail(rpath, "expected a number or a [rho_min, rho_max] pair");
    }
    if (t.rho.lo > t.rho.hi) fail(rpath, "rho_min > rho_max");
    if (!(t.rho.lo > 0.0) || t.rho.hi > 1.0)
      fail(rpath, "must lie in (0, 1]");
  }
  return t;
}

ExperimentConfig parse_config_json(const json& root) {
  check_object(root, "");
  check_keys(root, "",
             {"algorithm", "master_seed", "output_dir", "dataset", "partition",
              "model", "training"});
  ExperimentConfig cfg;
  if (const json* a = find(root, "algorithm"))
    cfg.algorithm = algorithm_from_name(get_string(*a, "algorithm"));
  if (const json* s = find(root, "master_seed")) {
    if (!s->is_number_unsigned())
      fail("master_seed", "expected a non-negative integer");
    cfg.master_seed = s->get<std::uint64_t>();
  }
  if (const json* o = find(root, "output_dir"))
    cfg.output_dir = get_string(*o, "output_dir");
  cfg.dataset = parse_dataset(require(root, "", "dataset"));
  cfg.partition = parse_partition(require(root, "", "partition"));
  cfg.model = parse_model(require(root, "", "model"));
  cfg.training = parse_training(require(root, "", "training"));
  return cfg;
}

void append_num(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  out += buf;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& source_name) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    // e.byte is 1-based; turn it into line/column for the message
    std::size_t line = 1, col = 1;
    const std::size_t stop = std::min(text.size(), e.byte > 0 ? e.byte - 1 : 0);
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source_name + ": parse error at line " +
                      std::to_string(line) + ", column " + std::to_string(col) +
                      ": " + e.what());
  }
  return parse_config_json(root);
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

PreparedExperiment prepare_experiment(const ExperimentConfig& cfg) {
  SeedTree tree(cfg.master_seed);

  Dataset pool;
  if (cfg.dataset.source == DatasetConfig::Source::synthetic) {
    RngStream rng = tree.stream("synth");
    pool = synth_clusters(cfg.dataset.classes, cfg.dataset.dim,
                          cfg.dataset.per_class, cfg.dataset.spread, rng);
  } else {
    pool = load_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
  }

  NetSpec net = cfg.model;
  if (net.input_dim == 0)
    net.input_dim = pool.dim();
  else if (net.input_dim != pool.dim())
    throw ConfigError("config: model.input_dim: dataset rows have width " +
                      std::to_string(pool.dim()) + ", not " +
                      std::to_string(net.input_dim));
  if (net.num_classes == 0)
    net.num_classes = pool.num_classes;
  else if (net.num_classes != pool.num_classes)
    throw ConfigError("config: model.classes: dataset carries " +
                      std::to_string(pool.num_classes) + " classes, not " +
                      std::to_string(net.num_classes));

  const std::uint64_t partition_seed = tree.stream("partition").next_u64();
  PartitionPlan plan;
  if (cfg.partition.scheme == PartitionPlan::Scheme::dirichlet) {
    plan = partition_dirichlet(pool, cfg.partition.num_clients,
                               cfg.partition.beta, partition_seed,
                               cfg.partition.min_samples);
  } else {
    plan = partition_pathological(pool, cfg.partition.num_clients,
                                  cfg.partition.classes_per_client,
                                  partition_seed);
    for (std::size_t i = 0; i < plan.assignments.size(); ++i)
      if (plan.assignments[i].size() < cfg.partition.min_samples)
        throw ConfigError(
            "config: partition.min_samples: client " + std::to_string(i) +
            " received only " + std::to_string(plan.assignments[i].size()) +
            " samples");
  }

  auto shared = std::make_shared<Dataset>(std::move(pool));
  auto splits = split_train_test(plan, shared, 0.75,
                                 tree.stream("split").next_u64());

  RunSettings rs;
  rs.num_clients = cfg.partition.num_clients;
  rs.rounds = cfg.training.rounds;
  rs.join_ratio = cfg.training.rho;
  rs.learning_rate = cfg.training.lr;
  rs.lambda = cfg.training.lambda;
  rs.epochs = cfg.training.epochs;
  rs.batch_size = cfg.training.batch_size;
  rs.traits = make_variant(cfg.algorithm);
  rs.net = net;
  rs.master_seed = cfg.master_seed;

  PreparedExperiment prep;
  prep.data = shared;
  prep.plan = std::move(plan);
  prep.splits = std::move(splits);
  prep.run = rs;
  return prep;
}

RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opt) {
  std::string outdir =
      opt.output_override.empty() ? cfg.output_dir : opt.output_override;
  if (opt.write_outputs) {
    if (outdir.empty())
      throw ConfigError(
          "config: output_dir: missing, and no --output directory given");
    ensure_output_dir(outdir, opt.force);
  }

  PreparedExperiment prep = prepare_experiment(cfg);
  prep.run.workers = opt.workers;

  Federation fed(prep.run, std::move(prep.splits), prep.data);
  RunOutcome out;
  out.reports = fed.run_all();
  out.best_accuracy = fed.best_accuracy();
  out.rounds_run = static_cast<int>(out.reports.size());

  if (opt.write_outputs) {
    out.output_dir = outdir;
    const fs::path base(outdir);
    write_atomic((base / "rounds.csv").string(), round_csv(out.reports));
    write_atomic((base / "clients.jsonl").string(), clients_jsonl(out.reports));
    write_atomic((base / "partition.txt").string(), plan_sidecar(prep.plan));
    write_atomic((base / "summary.json").string(), summary_json(cfg, out));
  }
  return out;
}

SweepOutcome run_sweep(const ExperimentConfig& base, const std::string& axis,
                       const std::vector<std::string>& values,
                       const RunOptions& opt) {
  if (values.empty()) throw ConfigError("sweep: no axis values given");
  if (axis != "algorithm" && axis != "lambda" && axis != "beta")
    throw ConfigError("sweep: axis must be algorithm, lambda or beta, not '" +
                      axis + "'");
  if (axis == "beta" &&
      base.partition.scheme != PartitionPlan::Scheme::dirichlet)
    throw ConfigError("sweep: a beta sweep needs the dirichlet scheme");

  std::string outdir =
      opt.output_override.empty() ? base.output_dir : opt.output_override;
  if (opt.write_outputs) {
    if (outdir.empty())
      throw ConfigError(
          "config: output_dir: missing, and no --output directory given");
    ensure_output_dir(outdir, opt.force);
  }

  auto parse_value = [&](const std::string& raw) {
    try {
      std::size_t used = 0;
      double v = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("sweep: '" + raw + "' is not a number");
    }
  };

  // every value must at least parse before any point runs; range problems
  // (a negative lambda, say) are recorded per point instead
  std::vector<double> numbers;
  std::vector<Algorithm> algos;
  for (const std::string& raw : values) {
    if (axis == "algorithm")
      algos.push_back(algorithm_from_name(raw));
    else
      numbers.push_back(parse_value(raw));
  }

  SweepOutcome out;
  out.ok = true;
  out.output_dir = opt.write_outputs ? outdir : "";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::string& raw = values[i];
    ExperimentConfig point = base;
    SweepPoint sp;
    sp.label = axis == "algorithm"
                   ? raw
                   : (axis == "lambda" ? "lambda_" : "beta_") + raw;
    try {
      if (axis == "algorithm") {
        point.algorithm = algos[i];
      } else if (axis == "lambda") {
        if (numbers[i] < 0.0) throw ConfigError("sweep: lambda must be >= 0");
        point.training.lambda = numbers[i];
      } else {
        if (!(numbers[i] > 0.0)) throw ConfigError("sweep: beta must be > 0");
        point.partition.beta = numbers[i];
      }
      RunOptions popt = opt;
      popt.output_override.clear();
      point.output_dir =
          opt.write_outputs ? (fs::path(outdir) / sp.label).string() : "";
      RunOutcome r = run_experiment(point, popt);
      sp.ok = true;
      sp.best_accuracy = r.best_accuracy;
    } catch (const std::exception& e) {
      sp.ok = false;
      sp.error = e.what();
      out.ok = false;
    }
    out.points.push_back(std::move(sp));
  }

  if (opt.write_outputs) {
    std::string csv = "point,best_accuracy\n";
    for (const SweepPoint& sp : out.points) {
      csv += sp.label;
      csv += ',';
      if (sp.ok) append_num(csv, sp.best_accuracy);
      csv += '\n';
    }
    write_atomic((fs::path(outdir) / "sweep.csv").string(), csv);
  }
  return out;
}

std::string round_csv(const std::vector<RoundReport>& reports) {
  std::string out =
      "t,n_selected,loss_bef,loss_aft,acc_mean,acc_std,acc_best,pir_mean\n";
  for (const RoundReport& r : reports) {
    out += std::to_string(r.t);
    out += ',';
    out += std::to_string(r.selected.size());
    out += ',';
    append_num(out, r.loss_bef);
    out += ',';
    append_num(out, r.loss_aft);
    out += ',';
    append_num(out, r.acc_mean);
    out += ',';
    append_num(out, r.acc_std);
    out += ',';
    append_num(out, r.acc_best);
    out += ',';
    if (r.pir_mean) append_num(out, *r.pir_mean);
    out += '\n';
  }
  return out;
}

std::string clients_jsonl(const std::vector<RoundReport>& reports) {
  std::string out;
  for (const RoundReport& r : reports) {
    for (std::size_t i = 0; i < r.client_acc.size(); ++i) {
      if (!r.client_acc[i]) continue;
      json line;
      line["round"] = r.t;
      line["client"] = i;
      line["acc"] = *r.client_acc[i];
      if (i < r.client_pir.size() && r.client_pir[i])
        line["pir"] = *r.client_pir[i];
      out += line.dump();
      out += '\n';
    }
  }
  return out;
}

std::string config_echo_json(const ExperimentConfig& cfg) {
  json d;
  d["algorithm"] = std::string(algorithm_name(cfg.algorithm));
  d["master_seed"] = cfg.master_seed;
  if (!cfg.output_dir.empty()) d["output_dir"] = cfg.output_dir;

  json ds;
  if (cfg.dataset.source == DatasetConfig::Source::synthetic) {
    ds["source"] = "synthetic";
    ds["classes"] = cfg.dataset.classes;
    ds["dim"] = cfg.dataset.dim;
    ds["per_class"] = cfg.dataset.per_class;
    ds["spread"] = cfg.dataset.spread;
  } else {
    ds["source"] = "idx";
    ds["images"] = cfg.dataset.images_path;
    ds["labels"] = cfg.dataset.labels_path;
  }
  d["dataset"] = ds;

  json pt;
  pt["num_clients"] = cfg.partition.num_clients;
  pt["min_samples"] = cfg.partition.min_samples;
  if (cfg.partition.scheme == PartitionPlan::Scheme::dirichlet) {
    pt["scheme"] = "dirichlet";
    pt["beta"] = cfg.partition.beta;
  } else {
    pt["scheme"] = "pathological";
    pt["classes_per_client"] = cfg.partition.classes_per_client;
  }
  d["partition"] = pt;

  json m;
  if (cfg.model.input_dim != 0) m["input_dim"] = cfg.model.input_dim;
  if (cfg.model.num_classes != 0) m["classes"] = cfg.model.num_classes;
  m["hidden"] = cfg.model.hidden;
  m["feature_dim"] = cfg.model.feature_dim;
  json cpn;
  cpn["activation"] = cfg.model.cpn_activation == CpnActivation::relu ? "relu"
                      : cfg.model.cpn_activation == CpnActivation::tanh
                          ? "tanh"
                          : "sigmoid";
  cpn["norm"] =
      cfg.model.cpn_norm == CpnNorm::layer_norm ? "layer_norm" : "none";
  m["cpn"] = cpn;
  d["model"] = m;

  json tr;
  tr["rounds"] = cfg.training.rounds;
  if (cfg.training.rho.fixed())
    tr["rho"] = cfg.training.rho.lo;
  else
    tr["rho"] = json::array({cfg.training.rho.lo, cfg.training.rho.hi});
  tr["lr"] = cfg.training.lr;
  tr["lambda"] = cfg.training.lambda;
  tr["epochs"] = cfg.training.epochs;
  tr["batch_size"] = cfg.training.batch_size;
  d["training"] = tr;

  return d.dump(2) + "\n";
}

std::string summary_json(const ExperimentConfig& cfg, const RunOutcome& out) {
  json s;
  s["algorithm"] = std::string(algorithm_name(cfg.algorithm));
  s["best_accuracy"] = out.best_accuracy;
  s["rounds_run"] = out.rounds_run;
  s["master_seed"] = cfg.master_seed;
  s["config"] = json::parse(config_echo_json(cfg));
  return s.dump(2) + "\n";
}

void ensure_output_dir(const std::string& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir))
      throw UsageError("output path '" + dir + "' exists and is not a directory");
    if (!force && !fs::is_empty(dir))
      throw UsageError("output directory '" + dir +
                       "' already has contents; pass --force to write anyway");
  } else {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
      throw UsageError("cannot create output directory '" + dir +
                       "': " + ec.message());
  }
}

void write_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot open '" + tmp + "' for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) throw UsageError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    throw UsageError("cannot move '" + tmp + "' into place: " + ec.message());
}

}  // namespace fedcp
