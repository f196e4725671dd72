#include "nanoflow/experiments.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include "nanoflow/errors.hpp"
#include "nanoflow/tensor_io.hpp"

namespace nf {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Grid: return "grid";
    case ExperimentKind::SchemeComparison: return "scheme_comparison";
    case ExperimentKind::LlrSweep: return "llr_sweep";
    case ExperimentKind::SharedLayersAblation: return "shared_layers_ablation";
    case ExperimentKind::KScaling: return "k_scaling";
    case ExperimentKind::CouplingComparison: return "coupling_comparison";
  }
  return "grid";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::Grid, ExperimentKind::SchemeComparison, ExperimentKind::LlrSweep,
                 ExperimentKind::SharedLayersAblation, ExperimentKind::KScaling, ExperimentKind::CouplingComparison})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown experiment '" + s + "'");
}

// ---------------------------------------------------------------------------
// specs

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown " + what + " key '" + key + "'");
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_csv_file(const fs::path& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) os << (i ? "," : "") << csv_escape(fields[i]);
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace

json DataSpec::to_json() const {
  return json{{"kind", kind},         {"n", n},           {"length", length}, {"seed", seed},
              {"path", path},         {"patch", patch},   {"channels", channels},
              {"images", images},     {"height", height}, {"width", width}};
}

DataSpec DataSpec::from_json(const json& j) {
  reject_unknown(j, {"kind", "n", "length", "seed", "path", "patch", "channels", "images", "height", "width"},
                 "data spec");
  try {
    DataSpec d;
    d.kind = j.value("kind", d.kind);
    d.n = j.value("n", d.n);
    d.length = j.value("length", d.length);
    d.seed = j.value("seed", d.seed);
    d.path = j.value("path", d.path);
    d.patch = j.value("patch", d.patch);
    d.channels = j.value("channels", d.channels);
    d.images = j.value("images", d.images);
    d.height = j.value("height", d.height);
    d.width = j.value("width", d.width);
    return d;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad data spec: ") + e.what());
  }
}

Dataset make_dataset(const DataSpec& spec) {
  if (spec.kind == "two_moons" || spec.kind == "rings" || spec.kind == "gaussian_grid")
    return gen_toy2d(spec.kind, spec.n, spec.seed);
  if (spec.kind == "seq1d") return gen_seq1d(spec.n, spec.length, spec.seed);
  if (spec.kind == "images") {
    if (spec.path.empty()) throw ConfigError("image data needs a path");
    return load_image_patches(spec.path, spec.patch, spec.channels);
  }
  if (spec.kind == "synthetic_images") {
    const fs::path tmp = fs::temp_directory_path() /
                         ("nanoflow_synthetic_" + std::to_string(::getpid()) + "_" +
                          std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".nftn");
    write_synthetic_images(tmp, spec.images, spec.height, spec.width, spec.channels, spec.seed);
    Dataset ds;
    try {
      ds = load_image_patches(tmp, spec.patch, spec.channels);
    } catch (...) {
      fs::remove(tmp);
      throw;
    }
    fs::remove(tmp);
    ds.kind = "synthetic_images";
    ds.seed = spec.seed;
    return ds;
  }
  throw ConfigError("unknown data kind '" + spec.kind + "'");
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  reject_unknown(j, {"id", "experiment", "model", "training", "data", "sweep", "seeds", "out"}, "experiment spec");
  ExperimentSpec s;
  s.raw = j;
  try {
    s.id = j.value("id", std::string("experiment"));
    s.kind = experiment_kind_from_string(j.value("experiment", std::string("grid")));
    s.model = j.value("model", json::object());
    s.training = j.value("training", json::object());
    if (j.contains("data")) s.data = DataSpec::from_json(j["data"]);
    s.sweep = j.value("sweep", json::object());
    if (j.contains("seeds")) s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    s.out = j.value("out", std::string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment spec: ") + e.what());
  }
  if (!s.model.is_object() || !s.training.is_object() || !s.sweep.is_object())
    throw ConfigError("model, training and sweep must be JSON objects");
  if (s.seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set<std::uint64_t>(s.seeds.begin(), s.seeds.end()).size() != s.seeds.size())
    throw ConfigError("seeds must be distinct");
  TrainConfig::from_json(s.training).validate();
  return s;
}

// ---------------------------------------------------------------------------
// resolution

namespace {

std::string value_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

void require_schemes(const json& sweep, const std::vector<std::string>& needed, const std::string& what) {
  for (const auto& s : needed)
    if (std::find(sweep["scheme"].begin(), sweep["scheme"].end(), json(s)) == sweep["scheme"].end())
      throw ConfigError(what + " needs scheme '" + s + "' in the sweep");
}

json default_axes(const ExperimentSpec& spec) {
  json sweep = spec.sweep;
  auto set_default = [&](const char* key, json values) {
    if (!sweep.contains(key)) sweep[key] = std::move(values);
  };
  switch (spec.kind) {
    case ExperimentKind::Grid: break;
    case ExperimentKind::SchemeComparison:
      set_default("scheme", {"baseline", "naive", "decomp", "nanoflow"});
      require_schemes(sweep, {"baseline", "naive", "decomp", "nanoflow"}, "scheme comparison");
      break;
    case ExperimentKind::LlrSweep:
      set_default("scheme", {"baseline", "nanoflow"});
      require_schemes(sweep, {"baseline", "nanoflow"}, "LLR sweep");
      if (!sweep.contains("groups") || sweep["groups"].size() < 2)
        throw ConfigError("LLR sweep needs at least two group counts under sweep.groups");
      break;
    case ExperimentKind::SharedLayersAblation: {
      set_default("scheme", {"baseline", "naive", "nanoflow"});
      const std::size_t L = ModelConfig::from_json(spec.model).layers;
      if (!sweep.contains("shared_layers")) {
        json all = json::array();
        for (std::size_t l = 0; l <= L; ++l) all.push_back(l);
        sweep["shared_layers"] = all;
      }
      for (const auto& v : sweep["shared_layers"])
        if (!v.is_number_unsigned() || v.get<std::size_t>() > L)
          throw ConfigError("shared_layers values must lie in [0, " + std::to_string(L) + "]");
      break;
    }
    case ExperimentKind::KScaling: {
      set_default("scheme", {"baseline", "nanoflow"});
      if (!sweep.contains("flows") || sweep["flows"].size() < 2)
        throw ConfigError("K scaling needs at least two flow counts under sweep.flows");
      const auto ks = sweep["flows"].get<std::vector<std::size_t>>();
      if (!std::is_sorted(ks.begin(), ks.end()) || std::adjacent_find(ks.begin(), ks.end()) != ks.end())
        throw ConfigError("sweep.flows must be strictly ascending");
      break;
    }
    case ExperimentKind::CouplingComparison:
      set_default("coupling", {"affine", "rq_spline"});
      set_default("scheme", {"baseline", "nanoflow"});
      break;
  }
  for (const auto& [key, values] : sweep.items())
    if (!values.is_array() || values.empty()) throw ConfigError("sweep." + key + " must be a non-empty list");
  return sweep;
}

}  // namespace

std::vector<Combination> resolve(const ExperimentSpec& spec) {
  const json sweep = default_axes(spec);
  std::vector<std::string> keys;
  for (const auto& [key, _] : sweep.items()) keys.push_back(key);  // json objects iterate sorted
  std::size_t total = 1;
  for (const auto& k : keys) total *= sweep[k].size();

  std::vector<Combination> combos;
  std::set<std::string> seen;
  for (std::size_t flat = 0; flat < total; ++flat) {
    json m = spec.model, values = json::object();
    std::size_t rest = flat;
    for (std::size_t i = keys.size(); i-- > 0;) {
      const auto& axis = sweep[keys[i]];
      const json& v = axis[rest % axis.size()];
      rest /= axis.size();
      m[keys[i]] = v;
      values[keys[i]] = v;
    }
    const std::string scheme = m.value("scheme", std::string("baseline"));
    std::set<std::string> dropped;
    if (scheme != "nanoflow")
      for (const char* k : {"embed_dim", "injections", "per_flow_projection", "biases_cached"}) dropped.insert(k);
    if (scheme == "baseline") dropped.insert("shared_layers");
    for (const auto& k : dropped) {
      m.erase(k);
      values.erase(k);
    }
    ModelConfig cfg = ModelConfig::from_json(m);
    cfg.seed = 0;
    cfg.validate();
    build_model(cfg);  // estimator-level checks
    json resolved = cfg.to_json();
    resolved.erase("seed");
    if (!seen.insert(resolved.dump()).second) continue;
    Combination c;
    c.index = combos.size();
    c.values = values;
    c.model = resolved;
    for (const auto& [k, v] : values.items()) c.label += (c.label.empty() ? "" : ";") + k + "=" + value_text(v);
    if (c.label.empty()) c.label = "base";
    combos.push_back(std::move(c));
  }
  return combos;
}

// ---------------------------------------------------------------------------
// rows and tables

const std::vector<std::string>& ResultRow::csv_header() {
  static const std::vector<std::string> h = {
      "experiment", "combo",     "label",    "scheme",     "seed",     "param_total", "trunk",
      "head",       "embedding", "injection", "flow",      "initial_ll", "final_ll", "final_nll",
      "bpd",        "diverged",  "skipped_steps", "note",  "runtime_seconds"};
  return h;
}

std::vector<std::string> ResultRow::csv_fields(bool with_runtime) const {
  std::vector<std::string> f = {experiment,
                                std::to_string(combo),
                                label,
                                scheme,
                                std::to_string(seed),
                                std::to_string(ledger.total()),
                                std::to_string(ledger.trunk),
                                std::to_string(ledger.head),
                                std::to_string(ledger.embedding),
                                std::to_string(ledger.injection),
                                std::to_string(ledger.flow),
                                fmt(initial_ll),
                                fmt(final_ll),
                                fmt(-final_ll),
                                bpd ? fmt(*bpd) : std::string(),
                                diverged ? "1" : "0",
                                std::to_string(skipped_steps),
                                note};
  if (with_runtime) f.push_back(fmt(runtime_seconds));
  return f;
}

const std::vector<std::string>& Aggregate::csv_header() {
  static const std::vector<std::string> h = {"combo", "label", "scheme", "runs", "diverged",
                                             "param_total", "metric_mean", "metric_sem", "ll_mean"};
  return h;
}

std::vector<std::string> Aggregate::csv_fields() const {
  return {std::to_string(combo),    label,         scheme,    std::to_string(runs), std::to_string(diverged),
          std::to_string(param_total), fmt(mean), fmt(sem), fmt(mean_ll)};
}

json Verdict::to_json() const {
  return json{{"name", name}, {"passed", passed}, {"advisory", advisory}, {"detail", detail}};
}

namespace {

std::pair<double, double> mean_sem(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
}

bool usable(const ResultRow& r) { return !r.diverged && std::isfinite(r.metric()) && std::isfinite(r.final_ll); }

}  // namespace

std::vector<Aggregate> ResultTable::aggregates() const {
  std::vector<Aggregate> out;
  for (const auto& c : combos) {
    Aggregate a;
    a.combo = c.index;
    a.label = c.label;
    a.scheme = c.model.value("scheme", std::string());
    std::vector<double> metric, ll;
    for (const auto& r : rows) {
      if (r.combo != c.index) continue;
      a.param_total = r.ledger.total();
      if (!usable(r)) {
        ++a.diverged;
        continue;
      }
      metric.push_back(r.metric());
      ll.push_back(r.final_ll);
    }
    a.runs = metric.size();
    std::tie(a.mean, a.sem) = mean_sem(metric);
    a.mean_ll = mean_sem(ll).first;
    out.push_back(a);
  }
  return out;
}

std::size_t ResultTable::diverged() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const ResultRow& r) { return !usable(r); }));
}

void ResultTable::write_csv(const fs::path& path) const {
  std::vector<std::vector<std::string>> lines;
  for (const auto& r : rows) lines.push_back(r.csv_fields());
  write_csv_file(path, ResultRow::csv_header(), lines);
}

void ResultTable::write_aggregate_csv(const fs::path& path) const {
  std::vector<std::vector<std::string>> lines;
  for (const auto& a : aggregates()) lines.push_back(a.csv_fields());
  write_csv_file(path, Aggregate::csv_header(), lines);
}

bool ExperimentResult::passed() const {
  return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.advisory || v.passed; });
}

// ---------------------------------------------------------------------------
// verdicts

namespace {

const Combination& combo_of(const ResultTable& t, std::size_t idx) { return t.combos.at(idx); }

std::size_t model_key(const Combination& c, const char* key) { return c.model.at(key).get<std::size_t>(); }

// The label with one swept key removed; aggregates sharing it form a group.
std::string label_without(const Combination& c, const std::string& key) {
  std::string out;
  for (const auto& [k, v] : c.values.items())
    if (k != key) out += (out.empty() ? "" : ";") + k + "=" + value_text(v);
  return out;
}

double joint_sem(const Aggregate& a, const Aggregate& b) { return std::sqrt(a.sem * a.sem + b.sem * b.sem); }

std::string describe(const Aggregate& a) {
  std::ostringstream os;
  os << a.scheme << " " << a.mean << " +- " << a.sem << " (n=" << a.runs << ")";
  return os.str();
}

}  // namespace

std::vector<Verdict> ordering_verdicts(const ResultTable& table) {
  std::vector<Verdict> out;
  std::map<std::string, std::map<std::string, Aggregate>> groups;
  for (const auto& a : table.aggregates()) groups[label_without(combo_of(table, a.combo), "scheme")][a.scheme] = a;
  for (const auto& [group, by_scheme] : groups) {
    const std::string suffix = group.empty() ? "" : " [" + group + "]";
    auto missing = [&](const std::string& s) { return !by_scheme.count(s) || by_scheme.at(s).runs == 0; };
    bool complete = true;
    for (const char* s : {"baseline", "naive", "decomp", "nanoflow"}) complete = complete && !missing(s);
    if (!complete) {
      out.push_back({"ordering" + suffix, false, false, "a scheme has no finished runs"});
      continue;
    }
    auto le = [&](const char* a, const char* b) {
      const Aggregate &x = by_scheme.at(a), &y = by_scheme.at(b);
      const double tol = joint_sem(x, y);
      std::ostringstream d;
      d << describe(x) << " vs " << describe(y) << ", tolerance " << tol;
      out.push_back({std::string(a) + " <= " + b + suffix, x.mean <= y.mean + tol, false, d.str()});
    };
    le("baseline", "nanoflow");
    le("nanoflow", "decomp");
    le("decomp", "naive");
    const Aggregate &nano = by_scheme.at("nanoflow"), &naive = by_scheme.at("naive");
    const double gap = naive.mean - nano.mean, tol = joint_sem(nano, naive);
    std::ostringstream d;
    d << "gap " << gap << " vs joint stderr " << tol;
    out.push_back({"nanoflow < naive (strict)" + suffix, gap > tol, false, d.str()});
  }
  if (const std::size_t n = table.diverged())
    out.push_back({"diverged runs", false, true, std::to_string(n) + " runs excluded from aggregates"});
  return out;
}

std::vector<LlrPoint> llr_points(const ResultTable& table) {
  // (groups, seed) -> ll per scheme
  std::map<std::size_t, std::map<std::uint64_t, std::map<std::string, double>>> ll;
  for (const auto& r : table.rows) {
    if (!usable(r)) continue;
    ll[model_key(combo_of(table, r.combo), "groups")][r.seed][r.scheme] = r.final_ll;
  }
  std::vector<LlrPoint> out;
  for (const auto& [g, by_seed] : ll) {
    LlrPoint p;
    p.groups = g;
    for (const auto& [seed, s] : by_seed)
      if (s.count("baseline") && s.count("nanoflow")) p.llr.push_back(s.at("baseline") - s.at("nanoflow"));
    std::tie(p.mean, p.sem) = mean_sem(p.llr);
    out.push_back(p);
  }
  return out;
}

std::vector<Verdict> llr_verdicts(const ResultTable& table) {
  std::vector<Verdict> out;
  const auto pts = llr_points(table);
  if (pts.size() < 2 || pts.front().llr.empty() || pts.back().llr.empty()) {
    out.push_back({"LLR(min G) < LLR(max G)", false, false, "not enough finished runs"});
    return out;
  }
  std::ostringstream d;
  for (const auto& p : pts) d << "G=" << p.groups << ": " << p.mean << " +- " << p.sem << " (n=" << p.llr.size() << "); ";
  out.push_back({"LLR(min G) < LLR(max G)", pts.front().mean < pts.back().mean, false, d.str()});

  std::vector<std::pair<std::size_t, Aggregate>> base;
  for (const auto& a : table.aggregates())
    if (a.scheme == "baseline" && a.runs > 0) base.emplace_back(model_key(combo_of(table, a.combo), "groups"), a);
  std::sort(base.begin(), base.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  bool monotone = true;
  std::ostringstream m;
  for (std::size_t i = 0; i < base.size(); ++i) {
    m << "G=" << base[i].first << ": " << base[i].second.mean_ll << "; ";
    // ll nondecreasing in G is metric nonincreasing, within stderr
    if (i > 0 && base[i].second.mean > base[i - 1].second.mean + joint_sem(base[i].second, base[i - 1].second))
      monotone = false;
  }
  out.push_back({"baseline LL nondecreasing in G", monotone, true, m.str()});
  return out;
}

std::vector<Verdict> ablation_verdicts(const ResultTable& table) {
  std::vector<Verdict> out;
  std::optional<Aggregate> baseline;
  std::map<std::string, std::map<std::size_t, Aggregate>> curve;  // scheme -> shared layers -> aggregate
  std::size_t L = 0;
  for (const auto& a : table.aggregates()) {
    const auto& c = combo_of(table, a.combo);
    L = model_key(c, "layers");
    if (a.scheme == "baseline") {
      baseline = a;
    } else {
      curve[a.scheme][model_key(c, "shared_layers")] = a;
    }
  }
  if (curve.count("naive") && curve.count("nanoflow") && curve["naive"].count(L) && curve["nanoflow"].count(L)) {
    const Aggregate &nano = curve["nanoflow"][L], &naive = curve["naive"][L];
    const double tol = joint_sem(nano, naive);
    out.push_back({"nanoflow <= naive at full sharing", nano.runs > 0 && naive.runs > 0 && nano.mean <= naive.mean + tol,
                   false, describe(nano) + " vs " + describe(naive)});
  } else {
    out.push_back({"nanoflow <= naive at full sharing", false, false, "full-sharing cells missing"});
  }
  if (baseline) {
    for (const auto& [scheme, pts] : curve) {
      if (!pts.count(0)) continue;
      const Aggregate& a = pts.at(0);
      const double tol = 2 * joint_sem(a, *baseline);
      out.push_back({scheme + " with no sharing matches baseline", std::abs(a.mean - baseline->mean) <= tol, true,
                     describe(a) + " vs " + describe(*baseline)});
    }
  }
  return out;
}

std::vector<Verdict> k_scaling_verdicts(const ResultTable& table) {
  std::vector<Verdict> out;
  std::map<std::string, std::map<std::size_t, const ResultRow*>> first_row;  // scheme -> K -> any row
  for (const auto& r : table.rows) first_row[r.scheme].try_emplace(model_key(combo_of(table, r.combo), "flows"), &r);
  if (first_row.count("nanoflow")) {
    bool ok = true;
    std::ostringstream d;
    const auto& pts = first_row["nanoflow"];
    for (auto it = pts.begin(); std::next(it) != pts.end(); ++it) {
      const auto nx = std::next(it);
      const double k1 = static_cast<double>(it->first), k2 = static_cast<double>(nx->first);
      const double t1 = static_cast<double>(it->second->ledger.total()), t2 = static_cast<double>(nx->second->ledger.total());
      // t2/t1 < 1 + 0.1 (k2/k1 - 1), cross-multiplied to stay exact
      const bool pass = t2 * k1 < t1 * (k1 + 0.1 * (k2 - k1));
      ok = ok && pass;
      d << "K " << it->first << "->" << nx->first << ": " << it->second->ledger.total() << "->"
        << nx->second->ledger.total() << "; ";
    }
    out.push_back({"nanoflow ledger grows sublinearly", ok, false, d.str()});
  }
  if (first_row.count("baseline")) {
    bool ok = true;
    const auto& pts = first_row["baseline"];
    for (auto it = pts.begin(); std::next(it) != pts.end(); ++it) {
      const auto nx = std::next(it);
      ok = ok && it->second->ledger.trunk * nx->first == nx->second->ledger.trunk * it->first;
    }
    out.push_back({"baseline trunk grows linearly in K", ok, false, ""});
  }
  std::vector<std::pair<std::size_t, Aggregate>> nano;
  for (const auto& a : table.aggregates())
    if (a.scheme == "nanoflow" && a.runs > 0) nano.emplace_back(model_key(combo_of(table, a.combo), "flows"), a);
  std::sort(nano.begin(), nano.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  bool monotone = true;
  for (std::size_t i = 1; i < nano.size(); ++i)
    if (nano[i].second.mean > nano[i - 1].second.mean + joint_sem(nano[i].second, nano[i - 1].second)) monotone = false;
  out.push_back({"nanoflow NLL nonincreasing in K", monotone, true, ""});
  return out;
}

std::vector<Verdict> coupling_verdicts(const ResultTable& table) {
  std::vector<Verdict> out;
  bool all_finite = true;
  for (const auto& a : table.aggregates()) all_finite = all_finite && a.runs > 0 && std::isfinite(a.mean);
  out.push_back({"all cells finite", all_finite, false, std::to_string(table.combos.size()) + " cells"});

  // affine vs spline models must differ only in their head tensors
  std::map<std::string, std::map<std::string, const Combination*>> cells;  // scheme -> coupling -> combo
  for (const auto& c : table.combos) cells[c.model.value("scheme", "")][c.model.value("coupling", "")] = &c;
  bool heads_only = true;
  std::ostringstream d;
  for (const auto& [scheme, by_coupling] : cells) {
    if (!by_coupling.count("affine") || !by_coupling.count("rq_spline")) continue;
    const FlowModel a = build_model(ModelConfig::from_json(by_coupling.at("affine")->model));
    const FlowModel s = build_model(ModelConfig::from_json(by_coupling.at("rq_spline")->model));
    const auto &ea = a.params().entries(), &es = s.params().entries();
    long head_delta = 0;
    bool same = ea.size() == es.size();
    for (std::size_t i = 0; same && i < ea.size(); ++i) {
      const bool head = ea[i].name.ends_with("head.w") || ea[i].name.ends_with("head.b");
      same = ea[i].name == es[i].name && (head || ea[i].tensor.shape() == es[i].tensor.shape());
      if (head && ea[i].trainable)
        head_delta += static_cast<long>(es[i].tensor.numel()) - static_cast<long>(ea[i].tensor.numel());
    }
    const long ledger_delta = static_cast<long>(count_parameters(s).total()) - static_cast<long>(count_parameters(a).total());
    heads_only = heads_only && same && ledger_delta == head_delta;
    d << scheme << ": ledger delta " << ledger_delta << ", head delta " << head_delta << "; ";
  }
  out.push_back({"ledger delta is in heads only", heads_only, false, d.str()});
  return out;
}

// ---------------------------------------------------------------------------
// running

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double round_trip_error(const FlowModel& model, const Tensor& x) {
  NoGradGuard no_grad;
  const auto ev = model.evaluate(x);
  const Tensor back = model.inverse(ev.latents);
  double err = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) err = std::max(err, std::abs(back.data()[i] - x.data()[i]));
  return err;
}

ResultRow run_cell(const ExperimentSpec& spec, const Combination& combo, std::uint64_t seed, const Dataset& data,
                   std::ostream* metrics, const fs::path* checkpoint_dir) {
  json mj = combo.model;
  mj["seed"] = seed;
  FlowModel model = build_model(ModelConfig::from_json(mj));
  TrainConfig tc = TrainConfig::from_json(spec.training);
  tc.seed = seed;

  ResultRow row;
  row.experiment = spec.id;
  row.combo = combo.index;
  row.label = combo.label;
  row.scheme = combo.model.value("scheme", std::string());
  row.seed = seed;
  row.ledger = count_parameters(model);

  const auto t0 = std::chrono::steady_clock::now();
  std::optional<MetricsSink> sink;
  if (metrics) sink.emplace(*metrics, true);
  try {
    const TrainResult r = train(model, data, tc, sink ? &*sink : nullptr);
    row.initial_ll = r.initial_eval_ll;
    row.final_ll = r.final_eval_ll;
    row.bpd = r.final_bpd;
    row.skipped_steps = r.skipped_steps;
    if (checkpoint_dir) save_checkpoint(model, *checkpoint_dir);
  } catch (const NumericError& e) {
    row.diverged = true;
    row.final_ll = std::numeric_limits<double>::quiet_NaN();
    if (data.integer_valued) row.bpd = std::numeric_limits<double>::quiet_NaN();
    row.note = e.what();
  }
  row.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

namespace {

// Perturbs every trainable tensor so couplings are far from the identity,
// then checks exact invertibility on a slice of the test data.
void round_trip_gate(const std::vector<Combination>& combos, const Dataset& data, std::uint64_t seed) {
  const std::size_t n = std::min<std::size_t>(32, data.test.dim(0));
  const std::size_t per = data.test.numel() / data.test.dim(0);
  Shape shape = data.test.shape();
  shape[0] = n;
  Tensor x(shape, std::vector<double>(data.test.data().begin(), data.test.data().begin() + static_cast<std::ptrdiff_t>(n * per)));
  if (data.integer_valued) {
    Rng q(seed);
    x = dequantize(x, data.levels, q);
  }
  for (const auto& c : combos) {
    json mj = c.model;
    mj["seed"] = seed;
    FlowModel m = build_model(ModelConfig::from_json(mj));
    m.initialize_actnorm(x);
    Rng rng = Rng(seed).fork(stable_hash(c.label));
    for (const auto& e : m.params().entries()) {
      if (!e.trainable) continue;
      std::vector<double> v(e.tensor.data().begin(), e.tensor.data().end());
      for (auto& w : v) w += 0.05 * rng.normal();
      m.params().assign(e.name, v);
    }
    const double err = round_trip_error(m, x);
    if (!(err < 1e-6))
      throw NumericError("round-trip check failed for " + c.label + ": max error " + std::to_string(err));
  }
}

std::string cell_name(const ResultRow& r) { return "c" + std::to_string(r.combo) + "_seed" + std::to_string(r.seed); }

void write_outputs(const ExperimentSpec& spec, const ExperimentResult& res, const TrainConfig& tc,
                   const fs::path& out) {
  fs::create_directories(out);
  {
    std::ofstream os(out / "spec.json");
    if (!os) throw FormatError("cannot write " + (out / "spec.json").string());
    os << spec.raw.dump(2) << '\n';
  }
  json combos = json::array();
  for (const auto& c : res.table.combos) combos.push_back({{"index", c.index}, {"label", c.label}, {"model", c.model}});
  write_json_file(out / "resolved.json", {{"id", spec.id},
                                          {"experiment", to_string(spec.kind)},
                                          {"training", tc.to_json()},
                                          {"data", spec.data.to_json()},
                                          {"seeds", spec.seeds},
                                          {"combinations", combos}});
  res.table.write_csv(out / "results.csv");
  res.table.write_aggregate_csv(out / "aggregates.csv");
  json verdicts = json::array();
  for (const auto& v : res.verdicts) verdicts.push_back(v.to_json());
  write_json_file(out / "verdicts.json", {{"passed", res.passed()}, {"diverged", res.table.diverged()}, {"verdicts", verdicts}});

  if (spec.kind == ExperimentKind::LlrSweep) {
    std::vector<std::vector<std::string>> lines;
    for (const auto& p : llr_points(res.table))
      lines.push_back({std::to_string(p.groups), std::to_string(p.llr.size()), fmt(p.mean), fmt(p.sem)});
    write_csv_file(out / "llr.csv", {"groups", "runs", "llr_mean", "llr_sem"}, lines);
  }
  if (spec.kind == ExperimentKind::SharedLayersAblation) {
    std::vector<std::vector<std::string>> lines;
    for (const auto& a : res.table.aggregates()) {
      if (a.scheme == "baseline") continue;
      const auto& c = res.table.combos[a.combo];
      lines.push_back({a.scheme, std::to_string(model_key(c, "shared_layers")), std::to_string(a.runs), fmt(a.mean),
                       fmt(a.sem), std::to_string(a.param_total)});
    }
    write_csv_file(out / "curve.csv", {"variant", "shared_layers", "runs", "metric_mean", "metric_sem", "param_total"},
                   lines);
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& options) {
  const std::vector<Combination> combos = resolve(spec);
  const TrainConfig tc = TrainConfig::from_json(spec.training);
  tc.validate();
  const Dataset data = make_dataset(spec.data);
  for (const auto& c : combos) {
    const Shape item = ModelConfig::from_json(c.model).item_shape();
    if (item != data.item_shape())
      throw DimensionError("combination " + c.label + " expects items " + shape_str(item) + " but the data has " +
                           shape_str(data.item_shape()));
  }
  if (spec.kind == ExperimentKind::CouplingComparison) round_trip_gate(combos, data, spec.seeds.front());

  ExperimentResult res;
  res.table.experiment = spec.id;
  res.table.combos = combos;
  const std::size_t S = spec.seeds.size();
  res.table.rows.resize(combos.size() * S);
  std::vector<std::string> metrics(res.table.rows.size());
  const bool write = options.out.has_value();
  parallel_for(res.table.rows.size(), options.threads, [&](std::size_t i) {
    const Combination& c = combos[i / S];
    const std::uint64_t seed = spec.seeds[i % S];
    std::ostringstream log;
    std::optional<fs::path> ckpt;
    if (write && options.save_checkpoints)
      ckpt = *options.out / "checkpoints" / ("c" + std::to_string(c.index) + "_seed" + std::to_string(seed));
    res.table.rows[i] = run_cell(spec, c, seed, data, write ? &log : nullptr, ckpt ? &*ckpt : nullptr);
    metrics[i] = log.str();
  });

  switch (spec.kind) {
    case ExperimentKind::Grid: break;
    case ExperimentKind::SchemeComparison: res.verdicts = ordering_verdicts(res.table); break;
    case ExperimentKind::LlrSweep: res.verdicts = llr_verdicts(res.table); break;
    case ExperimentKind::SharedLayersAblation: res.verdicts = ablation_verdicts(res.table); break;
    case ExperimentKind::KScaling: res.verdicts = k_scaling_verdicts(res.table); break;
    case ExperimentKind::CouplingComparison: res.verdicts = coupling_verdicts(res.table); break;
  }

  if (write) {
    write_outputs(spec, res, tc, *options.out);
    fs::create_directories(*options.out / "metrics");
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      std::ofstream os(*options.out / "metrics" / (cell_name(res.table.rows[i]) + ".jsonl"));
      os << metrics[i];
    }
  }
  return res;
}

namespace {

ExperimentResult run_as(ExperimentSpec spec, ExperimentKind kind, const RunOptions& options) {
  spec.kind = kind;
  return run_experiment(spec, options);
}

}  // namespace

ExperimentResult run_scheme_comparison(ExperimentSpec spec, const RunOptions& options) {
  return run_as(std::move(spec), ExperimentKind::SchemeComparison, options);
}
ExperimentResult run_llr_sweep(ExperimentSpec spec, const RunOptions& options) {
  return run_as(std::move(spec), ExperimentKind::LlrSweep, options);
}
ExperimentResult run_shared_layers_ablation(ExperimentSpec spec, const RunOptions& options) {
  return run_as(std::move(spec), ExperimentKind::SharedLayersAblation, options);
}
ExperimentResult run_k_scaling(ExperimentSpec spec, const RunOptions& options) {
  return run_as(std::move(spec), ExperimentKind::KScaling, options);
}
ExperimentResult run_coupling_comparison(ExperimentSpec spec, const RunOptions& options) {
  return run_as(std::move(spec), ExperimentKind::CouplingComparison, options);
}

// ---------------------------------------------------------------------------
// samples

std::vector<fs::path> dump_samples(const FlowModel& model, std::size_t n, double temperature, std::uint64_t seed,
                                   const fs::path& out) {
  if (n == 0) return {};
  fs::create_directories(out);
  Rng rng(seed);
  const Tensor s = model.sample(n, temperature, rng);
  std::vector<fs::path> written{out / "samples.nftn"};
  save_tensor(written.back(), s);

  const ModelConfig& cfg = model.config();
  if (cfg.layout != Layout::Image || (cfg.channels != 1 && cfg.channels != 3)) return written;
  const std::size_t h = cfg.height, w = cfg.width, C = cfg.channels;
  std::size_t cols = 0;
  while (cols * cols < n) ++cols;
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t H = rows * h, W = cols * w;
  std::vector<unsigned char> img(H * W * C, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ty = i / cols, tx = i % cols;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < C; ++c) {
          const double v = s.data()[((i * h + y) * w + x) * C + c];
          const double level = std::isfinite(v) ? std::floor(v * 256.0) : 0.0;
          img[((ty * h + y) * W + tx * w + x) * C + c] = static_cast<unsigned char>(std::clamp(level, 0.0, 255.0));
        }
  }
  written.push_back(out / (C == 1 ? "samples.pgm" : "samples.ppm"));
  std::ofstream os(written.back(), std::ios::binary);
  if (!os) throw FormatError("cannot write " + written.back().string());
  os << (C == 1 ? "P5" : "P6") << '\n' << W << ' ' << H << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (!os) throw FormatError("failed writing " + written.back().string());
  return written;
}

}  // namespace nf
