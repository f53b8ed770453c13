#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "reflgrad/adam.hpp"
#include "reflgrad/errors.hpp"
#include "reflgrad/hmc.hpp"
#include "reflgrad/model.hpp"
#include "reflgrad/slab.hpp"
#include "reflgrad/vi.hpp"

namespace reflgrad {

// %.17g round-trips every double exactly, which is what makes emitted files
// reloadable without drift and reruns byte-comparable.
inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace io_detail {

inline bool parse_double(std::string_view tok, double& out) {
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc{} && res.ptr == last;
}

// Splits on whitespace and commas; a curve row may use either delimiter.
inline std::vector<std::string_view> tokenize(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() &&
           (line[i] == ' ' || line[i] == '\t' || line[i] == ',' || line[i] == '\r'))
      ++i;
    std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != ',' &&
           line[i] != '\r')
      ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline bool is_comment_or_blank(std::string_view line) {
  for (char c : line) {
    if (c == ' ' || c == '\t' || c == '\r') continue;
    return c == '#';
  }
  return true;
}

}  // namespace io_detail

// Reads a 3- or 4-column reflectivity table: Q, R, sigma_R and optionally the
// per-point FWHM resolution.  '#' lines are comments; columns may be separated
// by whitespace or commas.  Errors carry the 1-based line number.
inline curve load_curve(std::istream& in, const std::string& origin) {
  curve c;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (io_detail::is_comment_or_blank(line)) continue;
    auto toks = io_detail::tokenize(line);
    const std::string at = origin + ":" + std::to_string(lineno);
    if (toks.size() != 3 && toks.size() != 4)
      throw data_error(at + ": expected 3 or 4 numeric columns, got " +
                       std::to_string(toks.size()));
    if (width == 0) width = toks.size();
    if (toks.size() != width)
      throw data_error(at + ": row has " + std::to_string(toks.size()) +
                       " columns but the first data row has " + std::to_string(width));
    double v[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (!io_detail::parse_double(toks[i], v[i]) || !std::isfinite(v[i]))
        throw data_error(at + ": column " + std::to_string(i + 1) + " ('" +
                         std::string(toks[i]) + "') is not a finite number");
    }
    if (!(v[0] > 0.0)) throw data_error(at + ": Q must be strictly positive");
    if (!(v[2] > 0.0)) throw data_error(at + ": sigma_R must be strictly positive");
    if (width == 4 && !(v[3] >= 0.0))
      throw data_error(at + ": resolution FWHM must be non-negative");
    c.q.push_back(v[0]);
    c.r.push_back(v[1]);
    c.sigma_r.push_back(v[2]);
    if (width == 4) c.dq.push_back(v[3]);
  }
  if (c.q.size() < 5)
    throw data_error(origin + ": a curve needs at least 5 data rows, found " +
                     std::to_string(c.q.size()));
  return c;
}

inline curve load_curve(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open data file '" + path + "'");
  return load_curve(in, path);
}

inline void save_curve(std::ostream& out, const curve& c,
                       std::span<const std::string> comments = {}) {
  for (const auto& s : comments) out << "# " << s << "\n";
  out << (c.dq.empty() ? "# Q R sigma_R\n" : "# Q R sigma_R dQ_FWHM\n");
  for (std::size_t j = 0; j < c.q.size(); ++j) {
    out << fmt_full(c.q[j]) << " " << fmt_full(c.r[j]) << " " << fmt_full(c.sigma_r[j]);
    if (!c.dq.empty()) out << " " << fmt_full(c.dq[j]);
    out << "\n";
  }
}

inline void save_curve(const std::string& path, const curve& c,
                       std::span<const std::string> comments = {}) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write '" + path + "'");
  save_curve(out, c, comments);
}

// Generic numeric table with a '#'-prefixed header, used for posterior sample
// files.  Column names come from the last comment line before the data when
// its token count matches the data width.
struct numeric_table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

inline numeric_table load_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open sample file '" + path + "'");
  numeric_table t;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> last_comment;
  while (std::getline(in, line)) {
    ++lineno;
    if (io_detail::is_comment_or_blank(line)) {
      auto pos = line.find('#');
      if (pos != std::string::npos && t.rows.empty()) {
        auto toks = io_detail::tokenize(std::string_view(line).substr(pos + 1));
        last_comment.assign(toks.begin(), toks.end());
      }
      continue;
    }
    auto toks = io_detail::tokenize(line);
    std::vector<double> row(toks.size());
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (!io_detail::parse_double(toks[i], row[i]) || !std::isfinite(row[i]))
        throw data_error(path + ":" + std::to_string(lineno) + ": column " +
                         std::to_string(i + 1) + " is not a finite number");
    }
    if (!t.rows.empty() && row.size() != t.rows.front().size())
      throw data_error(path + ":" + std::to_string(lineno) + ": row has " +
                       std::to_string(row.size()) + " columns but the first data row has " +
                       std::to_string(t.rows.front().size()));
    t.rows.push_back(std::move(row));
  }
  if (t.rows.empty()) throw data_error(path + ": no data rows");
  if (last_comment.size() == t.rows.front().size()) t.columns = std::move(last_comment);
  return t;
}

inline void save_table(const std::string& path, std::span<const std::string> columns,
                       const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write '" + path + "'");
  if (!columns.empty()) {
    out << "#";
    for (const auto& c : columns) out << " " << c;
    out << "\n";
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i)
      out << (i ? " " : "") << fmt_full(row[i]);
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Run configuration.
//
// The document is JSON.  A parameter slot is either a bare number (fixed) or
// an object {"init": x, "bounds": [lo, hi]} with an optional "share" tag that
// ties slots across datasets to one fitted value.  Unknown keys anywhere are
// rejected so typos fail loudly instead of silently reverting to defaults.

struct q_grid {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t points = 0;  // 0 = no grid given
  bool log_spaced = false;

  std::vector<double> make() const {
    std::vector<double> q(points);
    for (std::size_t i = 0; i < points; ++i) {
      double f = points > 1 ? static_cast<double>(i) / static_cast<double>(points - 1) : 0.0;
      q[i] = log_spaced ? lo * std::pow(hi / lo, f) : lo + (hi - lo) * f;
    }
    return q;
  }
};

struct run_config {
  std::vector<dataset_def> datasets;
  std::vector<q_grid> grids;  // parallel to datasets
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  adam_options optimize;
  hmc_options hmc;
  vi_options vi;
  std::size_t profile_points = 512;
  double profile_pad = 50.0;
  nlohmann::json doc;  // normalized source document, used for config write-back

  model_spec build_spec() const { return model_spec::build(datasets); }
};

namespace io_detail {

using nlohmann::json;

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw config_error(where + ": unknown key '" + item.key() + "'");
  }
}

inline double want_number(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw config_error(where + ": missing key '" + key + "'");
  const json& v = j.at(key);
  if (!v.is_number()) throw config_error(where + ".'" + key + "' must be a number");
  return v.get<double>();
}

inline param_def parse_param(const json& j, const std::string& where) {
  if (j.is_number()) return fixed_param(j.get<double>());
  if (!j.is_object())
    throw config_error(where +
                       ": a parameter is a number (fixed) or an object with "
                       "\"init\" and \"bounds\" (free)");
  check_keys(j, {"init", "bounds", "share"}, where);
  if (!j.contains("init")) throw config_error(where + ": free parameter needs \"init\"");
  if (!j.at("init").is_number())
    throw config_error(where + ".init must be a number");
  if (!j.contains("bounds"))
    throw config_error(where + ": free parameter needs \"bounds\": [lower, upper]");
  const json& b = j.at("bounds");
  if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number())
    throw config_error(where + ".bounds must be an array of two numbers");
  std::string share;
  if (j.contains("share")) {
    if (!j.at("share").is_string())
      throw config_error(where + ".share must be a string tag");
    share = j.at("share").get<std::string>();
    if (share.empty()) throw config_error(where + ".share must not be empty");
  }
  return free_param(j.at("init").get<double>(), b[0].get<double>(), b[1].get<double>(),
                    share);
}

inline smear_mode parse_smear(const json& j, const std::string& where) {
  if (!j.is_string()) throw config_error(where + ".smear must be a string");
  std::string s = j.get<std::string>();
  if (s == "none") return smear_mode::none;
  if (s == "constant") return smear_mode::constant;
  if (s == "pointwise") return smear_mode::pointwise;
  throw config_error(where + ".smear must be one of none/constant/pointwise, got '" + s +
                     "'");
}

inline q_grid parse_grid(const json& j, const std::string& where) {
  if (!j.is_object()) throw config_error(where + ".grid must be an object");
  check_keys(j, {"from", "to", "points", "spacing"}, where + ".grid");
  q_grid g;
  g.lo = want_number(j, "from", where + ".grid");
  g.hi = want_number(j, "to", where + ".grid");
  double pts = want_number(j, "points", where + ".grid");
  if (!(g.lo > 0.0)) throw config_error(where + ".grid.from must be positive");
  if (!(g.hi > g.lo)) throw config_error(where + ".grid needs from < to");
  if (!(pts >= 2.0) || pts != std::floor(pts))
    throw config_error(where + ".grid.points must be an integer >= 2");
  g.points = static_cast<std::size_t>(pts);
  if (j.contains("spacing")) {
    std::string s = j.at("spacing").is_string() ? j.at("spacing").get<std::string>() : "";
    if (s == "log")
      g.log_spaced = true;
    else if (s != "linear")
      throw config_error(where + ".grid.spacing must be 'linear' or 'log'");
  }
  return g;
}

inline dataset_def parse_dataset(const json& j, std::size_t index, q_grid& grid) {
  const std::string where = "datasets[" + std::to_string(index) + "]";
  if (!j.is_object()) throw config_error(where + " must be an object");
  check_keys(j,
             {"name", "data", "grid", "fronting_sld", "layers", "backing_sld",
              "backing_rough", "scale", "bkg", "smear", "smear_pct"},
             where);
  dataset_def d;
  if (!j.contains("name") || !j.at("name").is_string() ||
      j.at("name").get<std::string>().empty())
    throw config_error(where + " needs a non-empty string \"name\"");
  d.name = j.at("name").get<std::string>();
  if (j.contains("data")) {
    if (!j.at("data").is_string()) throw config_error(where + ".data must be a path string");
    d.data_path = j.at("data").get<std::string>();
  }
  if (j.contains("grid")) grid = parse_grid(j.at("grid"), where);
  d.fronting_sld = j.contains("fronting_sld")
                       ? parse_param(j.at("fronting_sld"), where + ".fronting_sld")
                       : fixed_param(0.0);
  if (!j.contains("layers") || !j.at("layers").is_array())
    throw config_error(where + " needs a \"layers\" array");
  std::size_t li = 0;
  for (const json& lj : j.at("layers")) {
    const std::string lw = where + ".layers[" + std::to_string(li) + "]";
    if (!lj.is_object()) throw config_error(lw + " must be an object");
    check_keys(lj, {"name", "thick", "sld", "rough"}, lw);
    layer_def l;
    if (lj.contains("name")) {
      if (!lj.at("name").is_string()) throw config_error(lw + ".name must be a string");
      l.name = lj.at("name").get<std::string>();
    }
    for (const char* k : {"thick", "sld", "rough"})
      if (!lj.contains(k))
        throw config_error(lw + " needs \"" + k + "\" (every layer carries its thickness, "
                           "SLD, and the roughness of the interface above it)");
    l.thick = parse_param(lj.at("thick"), lw + ".thick");
    l.sld = parse_param(lj.at("sld"), lw + ".sld");
    l.rough_above = parse_param(lj.at("rough"), lw + ".rough");
    d.layers.push_back(std::move(l));
    ++li;
  }
  for (const char* k : {"backing_sld", "backing_rough"})
    if (!j.contains(k)) throw config_error(where + " needs \"" + k + "\"");
  d.backing_sld = parse_param(j.at("backing_sld"), where + ".backing_sld");
  d.backing_rough = parse_param(j.at("backing_rough"), where + ".backing_rough");
  if (j.contains("scale")) d.scale = parse_param(j.at("scale"), where + ".scale");
  if (j.contains("bkg")) d.bkg = parse_param(j.at("bkg"), where + ".bkg");
  if (j.contains("smear")) d.smear = parse_smear(j.at("smear"), where);
  if (d.smear == smear_mode::constant) {
    if (!j.contains("smear_pct"))
      throw config_error(where + ": constant smearing needs \"smear_pct\"");
    d.smear_pct = parse_param(j.at("smear_pct"), where + ".smear_pct");
  } else if (j.contains("smear_pct")) {
    throw config_error(where + ": \"smear_pct\" only applies to constant smearing; "
                       "pointwise resolution comes from the data file");
  }
  return d;
}

}  // namespace io_detail

inline run_config parse_config_json(const nlohmann::json& j, const std::string& origin) {
  using io_detail::check_keys;
  using io_detail::want_number;
  if (!j.is_object()) throw config_error(origin + ": top level must be an object");
  check_keys(j, {"datasets", "seed", "output", "optimize", "hmc", "vi", "profile"},
             origin);
  run_config cfg;
  cfg.doc = j;
  if (!j.contains("datasets") || !j.at("datasets").is_array() || j.at("datasets").empty())
    throw config_error(origin + ": needs a non-empty \"datasets\" array");
  std::size_t i = 0;
  for (const auto& dj : j.at("datasets")) {
    q_grid g;
    cfg.datasets.push_back(io_detail::parse_dataset(dj, i, g));
    cfg.grids.push_back(g);
    ++i;
  }
  if (j.contains("seed")) {
    const auto& s = j.at("seed");
    if (!s.is_number_unsigned())
      throw config_error(origin + ": seed must be a non-negative integer");
    cfg.seed = s.get<std::uint64_t>();
  }
  if (j.contains("output")) {
    if (!j.at("output").is_string())
      throw config_error(origin + ": output must be a directory path string");
    cfg.out_dir = j.at("output").get<std::string>();
  }
  if (j.contains("optimize")) {
    const auto& o = j.at("optimize");
    check_keys(o, {"lr", "iterations"}, "optimize");
    if (o.contains("lr")) cfg.optimize.lr = want_number(o, "lr", "optimize");
    if (o.contains("iterations"))
      cfg.optimize.iterations =
          static_cast<std::size_t>(want_number(o, "iterations", "optimize"));
  }
  if (j.contains("hmc")) {
    const auto& o = j.at("hmc");
    check_keys(o,
               {"chains", "draws", "burn_in", "max_tree_depth", "target_accept",
                "init_step", "init_jitter"},
               "hmc");
    if (o.contains("chains"))
      cfg.hmc.chains = static_cast<std::size_t>(want_number(o, "chains", "hmc"));
    if (o.contains("draws"))
      cfg.hmc.draws = static_cast<std::size_t>(want_number(o, "draws", "hmc"));
    if (o.contains("burn_in"))
      cfg.hmc.burn_in = static_cast<std::size_t>(want_number(o, "burn_in", "hmc"));
    if (o.contains("max_tree_depth"))
      cfg.hmc.max_tree_depth = static_cast<int>(want_number(o, "max_tree_depth", "hmc"));
    if (o.contains("target_accept"))
      cfg.hmc.target_accept = want_number(o, "target_accept", "hmc");
    if (o.contains("init_step")) cfg.hmc.init_step = want_number(o, "init_step", "hmc");
    if (o.contains("init_jitter"))
      cfg.hmc.init_jitter = want_number(o, "init_jitter", "hmc");
  }
  if (j.contains("vi")) {
    const auto& o = j.at("vi");
    check_keys(o,
               {"lr", "iterations", "restarts", "samples", "sigma0", "ema_decay",
                "tail_average"},
               "vi");
    if (o.contains("lr")) cfg.vi.lr = want_number(o, "lr", "vi");
    if (o.contains("iterations"))
      cfg.vi.iterations = static_cast<std::size_t>(want_number(o, "iterations", "vi"));
    if (o.contains("restarts"))
      cfg.vi.restarts = static_cast<std::size_t>(want_number(o, "restarts", "vi"));
    if (o.contains("samples"))
      cfg.vi.samples = static_cast<std::size_t>(want_number(o, "samples", "vi"));
    if (o.contains("sigma0")) cfg.vi.sigma0 = want_number(o, "sigma0", "vi");
    if (o.contains("ema_decay")) cfg.vi.ema_decay = want_number(o, "ema_decay", "vi");
    if (o.contains("tail_average"))
      cfg.vi.tail_average = want_number(o, "tail_average", "vi");
  }
  if (j.contains("profile")) {
    const auto& o = j.at("profile");
    check_keys(o, {"points", "pad"}, "profile");
    if (o.contains("points"))
      cfg.profile_points = static_cast<std::size_t>(want_number(o, "points", "profile"));
    if (o.contains("pad")) cfg.profile_pad = want_number(o, "pad", "profile");
  }
  return cfg;
}

inline run_config parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(path + ": " + e.what());
  }
  return parse_config_json(j, path);
}

// Returns the config document with every free parameter's "init" replaced by
// its entry in x, so a fit's endpoint can seed a later sampling run.
inline nlohmann::json config_with_values(const run_config& cfg, const model_spec& spec,
                                         std::span<const double> x) {
  if (x.size() != spec.free_count())
    throw config_error("parameter vector does not match the model");
  nlohmann::json doc = cfg.doc;
  auto& dsets = doc.at("datasets");
  const auto& layouts = spec.layouts();
  for (std::size_t di = 0; di < layouts.size(); ++di) {
    const model_spec::dataset_layout& lay = layouts[di];
    nlohmann::json& dj = dsets[di];
    auto set = [&](nlohmann::json& pj, int idx) {
      if (idx >= 0) pj["init"] = x[static_cast<std::size_t>(idx)];
    };
    if (dj.contains("fronting_sld")) set(dj.at("fronting_sld"), lay.sld[0]);
    auto& layers = dj.at("layers");
    for (std::size_t li = 0; li < layers.size(); ++li) {
      set(layers[li].at("thick"), lay.thick[li]);
      set(layers[li].at("sld"), lay.sld[li + 1]);
      set(layers[li].at("rough"), lay.rough[li]);
    }
    set(dj.at("backing_sld"), lay.sld[layers.size() + 1]);
    set(dj.at("backing_rough"), lay.rough[layers.size()]);
    if (dj.contains("scale")) set(dj.at("scale"), lay.scale);
    if (dj.contains("bkg")) set(dj.at("bkg"), lay.bkg);
    if (dj.contains("smear_pct")) set(dj.at("smear_pct"), lay.pct);
  }
  return doc;
}

// Parameter table in the shape of the case-study tables: name, initial value,
// prior box, and one result column.
inline void write_param_table(std::ostream& out, const model_spec& spec,
                              const std::string& result_header,
                              std::span<const double> result_mean,
                              std::span<const double> result_sd = {}) {
  const auto& fr = spec.free();
  std::size_t name_w = 9;
  for (const auto& f : fr) name_w = std::max(name_w, f.name.size());
  out << "  " << std::left;
  out.width(static_cast<std::streamsize>(name_w + 2));
  out << "parameter";
  out << std::left;
  char head[128];
  std::snprintf(head, sizeof head, "%-12s %-24s %s", "initial", "prior",
                result_header.c_str());
  out << head << "\n";
  for (std::size_t i = 0; i < fr.size(); ++i) {
    out << "  ";
    out.width(static_cast<std::streamsize>(name_w + 2));
    out << fr[i].name;
    std::string prior = "U(" + fmt_short(fr[i].lower) + ", " + fmt_short(fr[i].upper) + ")";
    char row[160];
    if (!result_mean.empty() && !result_sd.empty())
      std::snprintf(row, sizeof row, "%-12s %-24s %s +- %s",
                    fmt_short(fr[i].init).c_str(), prior.c_str(),
                    fmt_short(result_mean[i]).c_str(), fmt_short(result_sd[i]).c_str());
    else if (!result_mean.empty())
      std::snprintf(row, sizeof row, "%-12s %-24s %s", fmt_short(fr[i].init).c_str(),
                    prior.c_str(), fmt_short(result_mean[i]).c_str());
    else
      std::snprintf(row, sizeof row, "%-12s %-24s", fmt_short(fr[i].init).c_str(),
                    prior.c_str());
    out << row << "\n";
  }
}

}  // namespace reflgrad
