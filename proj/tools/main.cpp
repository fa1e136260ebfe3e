// Command-line front end: Monte Carlo tables, estimation on CSV data, and
// covariate balance summaries for pooled two-sample data sets.
#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "tsdc/simulation.hpp"

using nlohmann::json;
using namespace tsdc;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

IvEstimator iv_estimator_from_name(const std::string& name) {
  if (name == "tsiv") return IvEstimator::TSIV;
  if (name == "ts2sls") return IvEstimator::TS2SLS;
  if (name == "or") return IvEstimator::OR;
  if (name == "ipw") return IvEstimator::IPW;
  if (name == "aipw") return IvEstimator::AIPW;
  if (name == "reg") return IvEstimator::REG;
  if (name == "lik") return IvEstimator::LIK;
  if (name == "ast") return IvEstimator::AST;
  throw DataError("unknown estimator '" + name +
                  "' (expected tsiv, ts2sls, or, ipw, aipw, reg, lik, ast)");
}

std::vector<IvEstimator> parse_estimators(const std::string& list) {
  std::vector<IvEstimator> out;
  for (const auto& name : split_list(list)) out.push_back(iv_estimator_from_name(name));
  if (out.empty()) throw DataError("no estimators requested");
  return out;
}

std::string csv_sibling(const std::string& path) {
  const auto dot = path.find_last_of('.');
  const auto slash = path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return path + ".csv";
  return path.substr(0, dot) + ".csv";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string scenario = "table1";
  int reps = 200;
  int n1 = 0, n0 = 0;  // 0 keeps the scenario default
  std::uint64_t seed = 20240801;
  std::string estimators = "tsiv,ts2sls,or,ipw,aipw,lik";
  bool include_h2 = false;
  bool clip_weights = false;
  int threads = 0;
  std::string out;
  std::string export_sample;
};

int run_simulate(const SimulateArgs& a) {
  DgpConfig cfg = scenario_config(a.scenario);
  if (a.n1 > 0) cfg.n1 = a.n1;
  if (a.n0 > 0) cfg.n0 = a.n0;

  McOptions mo;
  mo.reps = a.reps;
  mo.estimators = parse_estimators(a.estimators);
  mo.include_h2 = a.include_h2;
  mo.clip_weights = a.clip_weights;
  mo.seed = a.seed;
  mo.threads = a.threads;

  if (!a.export_sample.empty()) write_csv(generate(cfg, a.seed, 0), a.export_sample);

  const std::vector<ModelCell> cells = {
      {true, true}, {true, false}, {false, true}, {false, false}};

  std::cout << "scenario " << a.scenario << "  n1=" << cfg.n1 << " n0=" << cfg.n0
            << " iv_coef=" << cfg.iv_coef << "  reps=" << a.reps << " seed=" << a.seed
            << "\n";

  json jcells = json::array();
  std::ostringstream csv;
  csv << "scenario,ps_model,or_model,estimator,bias,sd,used,failures\n";

  for (const ModelCell& cell : cells) {
    const McTable table = run_monte_carlo(cfg, cell, mo);
    const char* psm = cell.ps_correct ? "correct" : "misspecified";
    const char* orm = cell.or_correct ? "correct" : "misspecified";
    std::cout << "\ncell: propensity " << psm << ", regression " << orm << "\n";
    std::cout << "  " << std::left << std::setw(8) << "est" << std::right << std::setw(12)
              << "bias" << std::setw(12) << "sd" << std::setw(7) << "used" << std::setw(8)
              << "failed" << "\n";

    json jrows = json::array();
    for (const McRow& r : table.rows) {
      const std::string name = iv_estimator_name(r.estimator);
      std::cout << "  " << std::left << std::setw(8) << name << std::right << std::fixed
                << std::setprecision(5) << std::setw(12) << r.bias << std::setw(12) << r.sd
                << std::defaultfloat << std::setw(7) << r.used << std::setw(8) << r.failures
                << "\n";
      jrows.push_back({{"estimator", name},
                       {"bias", r.bias},
                       {"sd", r.sd},
                       {"used", r.used},
                       {"failures", r.failures}});
      csv << a.scenario << ',' << psm << ',' << orm << ',' << name << ','
          << std::setprecision(17) << r.bias << ',' << r.sd << ',' << r.used << ','
          << r.failures << "\n";
    }
    jcells.push_back({{"ps_model", psm}, {"or_model", orm}, {"rows", jrows}});
  }

  if (!a.out.empty()) {
    json j = {{"scenario", a.scenario},
              {"config",
               {{"n1", cfg.n1},
                {"n0", cfg.n0},
                {"iv_coef", cfg.iv_coef},
                {"true_beta", cfg.true_beta}}},
              {"reps", a.reps},
              {"seed", a.seed},
              {"include_h2", a.include_h2},
              {"clip_weights", a.clip_weights},
              {"estimators", split_list(a.estimators)},
              {"cells", jcells}};
    write_text(a.out, j.dump(2) + "\n");
    write_text(csv_sibling(a.out), csv.str());
    std::cout << "\nwrote " << a.out << " and " << csv_sibling(a.out) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- estimate

struct EstimateArgs {
  std::string data;
  std::string t_col = "t";
  std::string y_col = "y";
  std::string x_col = "x";
  std::string instrument;
  std::string exog;     // comma list of u columns
  std::string u_cols;   // defaults to instrument + exog
  std::string ps_terms; // default: intercept + every u column
  std::string or_terms;
  std::string estimators = "tsiv,ts2sls,or,ipw,aipw,lik";
  int bootstrap_reps = 0;
  std::uint64_t seed = 20240801;
  bool include_h2 = false;
  bool clip_weights = false;
  int threads = 0;
  std::string out;
};

bool estimator_needs_ps(IvEstimator e) {
  return e == IvEstimator::IPW || e == IvEstimator::AIPW || e == IvEstimator::REG ||
         e == IvEstimator::LIK || e == IvEstimator::AST;
}

bool estimator_needs_or(IvEstimator e) {
  return e == IvEstimator::OR || e == IvEstimator::AIPW || e == IvEstimator::REG ||
         e == IvEstimator::LIK || e == IvEstimator::AST;
}

Vec run_iv_estimator(const MergedSample& s, IvEstimator e, const BasisSpec& ps_spec,
                     const BasisSpec& or_spec, int instrument, const std::vector<int>& exog,
                     bool include_h2, const WeightPolicy& policy,
                     std::map<std::string, double>* diag = nullptr, Vec* se = nullptr,
                     std::string* se_error = nullptr) {
  const IvProblem iv = make_iv_problem(s, instrument, exog);
  const DesignMatrix f_ps = build_design(s.u, ps_spec);
  std::optional<FittedPs> ps;
  std::optional<FittedOr> orf;
  if (estimator_needs_ps(e)) ps = fit_logistic(f_ps, s.t);
  if (estimator_needs_or(e)) orf = fit_or_linear(build_design(s.u, or_spec), s);

  TsivFits fits;
  fits.ps = ps ? &*ps : nullptr;
  fits.orf = orf ? &*orf : nullptr;
  fits.f = &f_ps;

  Vec beta;
  switch (e) {
    case IvEstimator::TSIV: beta = tsiv_classic(iv); break;
    case IvEstimator::TS2SLS: beta = ts2sls(iv); break;
    default: {
      Mu3Method m;
      switch (e) {
        case IvEstimator::OR: m = Mu3Method::OR; break;
        case IvEstimator::IPW: m = Mu3Method::IPW; break;
        case IvEstimator::AIPW: m = Mu3Method::AIPW; break;
        case IvEstimator::REG: m = Mu3Method::REG; break;
        case IvEstimator::LIK: m = Mu3Method::LIK; break;
        default: m = Mu3Method::AST; break;
      }
      const BetaResult br = estimate_beta(iv, m, fits, include_h2, policy);
      beta = br.beta;
      if (diag) *diag = br.mu3.diag;
      break;
    }
  }

  if (se) {
    try {
      const EqStack stack = make_iv_stack(iv, e, fits, include_h2, policy, beta);
      *se = sandwich_se(stack, "beta");
    } catch (const Error& ex) {
      if (se_error) *se_error = ex.what();
    }
  }
  return beta;
}

int run_estimate(const EstimateArgs& a) {
  if (a.data.empty()) throw DataError("--data is required");
  if (a.instrument.empty()) throw DataError("--instrument is required");

  const std::vector<std::string> exog_names = split_list(a.exog);
  std::vector<std::string> u_names = split_list(a.u_cols);
  if (u_names.empty()) {
    u_names.push_back(a.instrument);
    for (const auto& c : exog_names) u_names.push_back(c);
  }

  CsvSchema schema;
  schema.t_col = a.t_col;
  schema.u_cols = u_names;
  schema.x_cols = {a.x_col};
  schema.y_cols = {a.y_col};
  const MergedSample s = ingest_csv(a.data, schema);

  auto u_index = [&](const std::string& name) {
    for (std::size_t j = 0; j < s.u_names.size(); ++j)
      if (s.u_names[j] == name) return static_cast<int>(j);
    throw DataError("column '" + name + "' is not among the loaded u columns");
  };
  const int instrument = u_index(a.instrument);
  std::vector<int> exog;
  for (const auto& c : exog_names) exog.push_back(u_index(c));

  const BasisSpec ps_spec = a.ps_terms.empty()
                                ? BasisSpec::intercept_and_columns(s.u_names)
                                : BasisSpec::parse(a.ps_terms, s.u_names);
  const BasisSpec or_spec = a.or_terms.empty()
                                ? BasisSpec::intercept_and_columns(s.u_names)
                                : BasisSpec::parse(a.or_terms, s.u_names);

  WeightPolicy policy;
  policy.clip = a.clip_weights;

  std::vector<std::string> coef_names;
  coef_names.push_back(a.x_col);
  for (const auto& c : exog_names) coef_names.push_back(c);

  json jest = json::object();
  bool any_failed = false;

  for (IvEstimator e : parse_estimators(a.estimators)) {
    const std::string name = iv_estimator_name(e);
    json jr = json::object();
    try {
      std::map<std::string, double> diag;
      Vec se;
      std::string se_error;
      const Vec beta = run_iv_estimator(s, e, ps_spec, or_spec, instrument, exog,
                                        a.include_h2, policy, &diag, &se, &se_error);

      json jb = json::object(), js = json::object();
      for (std::size_t j = 0; j < coef_names.size(); ++j) {
        jb[coef_names[j]] = beta[static_cast<int>(j)];
        if (se.size()) js[coef_names[j]] = se[static_cast<int>(j)];
      }
      jr["beta"] = jb;
      if (se.size())
        jr["se"] = js;
      else if (!se_error.empty())
        jr["se_error"] = se_error;
      if (!diag.empty()) jr["diagnostics"] = diag;

      std::cout << name << ":";
      for (std::size_t j = 0; j < coef_names.size(); ++j) {
        std::cout << "  " << coef_names[j] << "=" << std::fixed << std::setprecision(6)
                  << beta[static_cast<int>(j)];
        if (se.size())
          std::cout << " (" << std::setprecision(6) << se[static_cast<int>(j)] << ")";
        std::cout << std::defaultfloat;
      }
      std::cout << "\n";

      if (a.bootstrap_reps > 0) {
        auto closure = [&, e](const MergedSample& d) {
          return run_iv_estimator(d, e, ps_spec, or_spec, instrument, exog, a.include_h2,
                                  policy);
        };
        const BootstrapReport rep =
            tsdc::bootstrap(s, closure, a.bootstrap_reps, a.seed, 0.95, a.threads);
        json jbs = json::object(), jlo = json::object(), jhi = json::object();
        for (std::size_t j = 0; j < coef_names.size(); ++j) {
          jbs[coef_names[j]] = rep.se[static_cast<int>(j)];
          jlo[coef_names[j]] = rep.ci(static_cast<int>(j), 0);
          jhi[coef_names[j]] = rep.ci(static_cast<int>(j), 1);
        }
        jr["bootstrap"] = {{"B", rep.B},
                           {"failed", rep.n_failed},
                           {"level", rep.level},
                           {"se", jbs},
                           {"ci_lower", jlo},
                           {"ci_upper", jhi}};
        std::cout << "  bootstrap se:";
        for (std::size_t j = 0; j < coef_names.size(); ++j)
          std::cout << "  " << coef_names[j] << "=" << std::fixed << std::setprecision(6)
                    << rep.se[static_cast<int>(j)] << std::defaultfloat;
        std::cout << "  (failed " << rep.n_failed << "/" << rep.B << ")\n";
      }
    } catch (const Error& ex) {
      jr["error"] = ex.what();
      std::cout << name << ": failed: " << ex.what() << "\n";
      any_failed = true;
    }
    jest[name] = jr;
  }

  if (!a.out.empty()) {
    json j = {{"data", a.data},
              {"n", s.n()},
              {"n1", s.n1()},
              {"n0", s.n0()},
              {"coefficients", coef_names},
              {"include_h2", a.include_h2},
              {"clip_weights", a.clip_weights},
              {"estimators", jest}};
    if (a.bootstrap_reps > 0) {
      j["bootstrap_reps"] = a.bootstrap_reps;
      j["seed"] = a.seed;
    }
    write_text(a.out, j.dump(2) + "\n");
    std::cout << "wrote " << a.out << "\n";
  }
  return any_failed ? 2 : 0;
}

// ----------------------------------------------------------------- balance

struct BalanceArgs {
  std::string data;
  std::string t_col = "t";
  std::string u_cols;
  std::string ps_terms;
  std::string out;
};

int run_balance(const BalanceArgs& a) {
  if (a.data.empty()) throw DataError("--data is required");
  const std::vector<std::string> u_names = split_list(a.u_cols);
  if (u_names.empty()) throw DataError("--u-cols is required");

  CsvSchema schema;
  schema.t_col = a.t_col;
  schema.u_cols = u_names;
  const MergedSample s = ingest_csv(a.data, schema);

  const BasisSpec ps_spec = a.ps_terms.empty()
                                ? BasisSpec::intercept_and_columns(s.u_names)
                                : BasisSpec::parse(a.ps_terms, s.u_names);
  const FittedPs ps = fit_logistic(build_design(s.u, ps_spec), s.t);

  const int n = s.n();
  double wsum = 0.0;
  Vec w = Vec::Zero(n);  // pi/(1-pi) on auxiliary rows, then normalized
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) {
      w[i] = ps.pi[i] / (1.0 - ps.pi[i]);
      wsum += w[i];
    }
  if (wsum <= 0.0) throw FitError("degenerate balance weights");
  w /= wsum;

  json jcols = json::array();
  std::cout << std::left << std::setw(10) << "column" << std::right << std::setw(12)
            << "primary" << std::setw(10) << "(se)" << std::setw(12) << "aux"
            << std::setw(10) << "(se)" << std::setw(12) << "aux.w" << std::setw(10)
            << "(se)" << "\n";

  for (int j = 0; j < s.u.cols(); ++j) {
    double m1 = 0.0, m0 = 0.0, mw = 0.0;
    int n1 = 0, n0 = 0;
    for (int i = 0; i < n; ++i) {
      if (s.t[i] == 1) {
        m1 += s.u(i, j);
        ++n1;
      } else {
        m0 += s.u(i, j);
        ++n0;
        mw += w[i] * s.u(i, j);
      }
    }
    m1 /= n1;
    m0 /= n0;
    double v1 = 0.0, v0 = 0.0, vw = 0.0;
    for (int i = 0; i < n; ++i) {
      if (s.t[i] == 1) {
        v1 += (s.u(i, j) - m1) * (s.u(i, j) - m1);
      } else {
        v0 += (s.u(i, j) - m0) * (s.u(i, j) - m0);
        vw += w[i] * w[i] * (s.u(i, j) - mw) * (s.u(i, j) - mw);
      }
    }
    const double se1 = std::sqrt(v1 / (n1 - 1) / n1);
    const double se0 = std::sqrt(v0 / (n0 - 1) / n0);
    const double sew = std::sqrt(vw);

    std::cout << std::left << std::setw(10) << s.u_names[j] << std::right << std::fixed
              << std::setprecision(4) << std::setw(12) << m1 << std::setw(10) << se1
              << std::setw(12) << m0 << std::setw(10) << se0 << std::setw(12) << mw
              << std::setw(10) << sew << std::defaultfloat << "\n";

    jcols.push_back({{"column", s.u_names[j]},
                     {"primary_mean", m1},
                     {"primary_se", se1},
                     {"aux_mean", m0},
                     {"aux_se", se0},
                     {"aux_weighted_mean", mw},
                     {"aux_weighted_se", sew}});
  }

  if (!a.out.empty()) {
    json j = {{"data", a.data}, {"n1", s.n1()}, {"n0", s.n0()}, {"columns", jcols}};
    write_text(a.out, j.dump(2) + "\n");
    std::cout << "wrote " << a.out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moment-restriction estimation combining a primary and an auxiliary sample"};
  app.require_subcommand(1);

  SimulateArgs sa;
  CLI::App* sim = app.add_subcommand("simulate", "run the Monte Carlo study");
  sim->add_option("--scenario", sa.scenario, "table1, s1, s2 or s3");
  sim->add_option("--reps", sa.reps, "Monte Carlo replicates");
  sim->add_option("--n1", sa.n1, "override primary sample size");
  sim->add_option("--n0", sa.n0, "override auxiliary sample size");
  sim->add_option("--seed", sa.seed, "RNG seed");
  sim->add_option("--estimators", sa.estimators, "comma list of estimators");
  sim->add_flag("--include-h2", sa.include_h2, "add the score-style calibration block");
  sim->add_flag("--clip-weights", sa.clip_weights, "clip extreme auxiliary weights");
  sim->add_option("--threads", sa.threads, "worker threads (0: auto)");
  sim->add_option("--out", sa.out, "write JSON results here (plus a CSV sibling)");
  sim->add_option("--export-sample", sa.export_sample, "write one generated data set");

  EstimateArgs ea;
  CLI::App* est = app.add_subcommand("estimate", "estimate IV coefficients from a CSV");
  est->add_option("--data", ea.data, "CSV file")->required();
  est->add_option("--t-col", ea.t_col, "sample indicator column");
  est->add_option("--y-col", ea.y_col, "outcome column (primary rows)");
  est->add_option("--x-col", ea.x_col, "endogenous regressor column (auxiliary rows)");
  est->add_option("--instrument", ea.instrument, "instrument column")->required();
  est->add_option("--exog", ea.exog, "comma list of exogenous regressor columns");
  est->add_option("--u-cols", ea.u_cols, "covariate columns (default: instrument+exog)");
  est->add_option("--ps-terms", ea.ps_terms, "propensity design terms, e.g. 1,z0,z0:z1");
  est->add_option("--or-terms", ea.or_terms, "outcome regression design terms");
  est->add_option("--estimators", ea.estimators, "comma list of estimators");
  est->add_option("--bootstrap", ea.bootstrap_reps, "bootstrap replicates (0: off)");
  est->add_option("--seed", ea.seed, "bootstrap RNG seed");
  est->add_flag("--include-h2", ea.include_h2, "add the score-style calibration block");
  est->add_flag("--clip-weights", ea.clip_weights, "clip extreme auxiliary weights");
  est->add_option("--threads", ea.threads, "worker threads (0: auto)");
  est->add_option("--out", ea.out, "write JSON results here");

  BalanceArgs ba;
  CLI::App* bal = app.add_subcommand("balance", "covariate balance before/after weighting");
  bal->add_option("--data", ba.data, "CSV file")->required();
  bal->add_option("--t-col", ba.t_col, "sample indicator column");
  bal->add_option("--u-cols", ba.u_cols, "comma list of covariate columns")->required();
  bal->add_option("--ps-terms", ba.ps_terms, "propensity design terms");
  bal->add_option("--out", ba.out, "write JSON results here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) return run_simulate(sa);
    if (est->parsed()) return run_estimate(ea);
    if (bal->parsed()) return run_balance(ba);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
