#include "tsdc/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <thread>

namespace tsdc {

double DgpConfig::ps_intercept() const {
  return std::log(static_cast<double>(n1) / n0) - 1.5;
}

MergedSample generate(const DgpConfig& config, std::uint64_t seed, std::uint64_t rep) {
  if (config.n1 < 1 || config.n0 < 1) throw DataError("both sample sizes must be positive");
  RngStream rng(seed, rep);
  const int n = config.n1 + config.n0;

  MergedSample s;
  s.t.resize(n);
  s.u.resize(n, 3);
  s.x.resize(n, 1);
  s.y.resize(n, 1);
  s.has_x.assign(n, 0);
  s.has_y.assign(n, 0);
  s.u_names = {"z0", "z1", "z2"};
  s.x_names = {"x"};
  s.y_names = {"y"};
  s.x.setZero();
  s.y.setZero();

  for (int i = 0; i < config.n1; ++i) {
    const double z0 = 1.0 + rng.next_normal();
    const double z1 = 1.0 + rng.next_normal();
    const double z2 = 1.0 + rng.next_normal();
    const double g1 = rng.next_normal();
    const double g2 = rng.next_normal();
    const double eps = g1;
    const double e = 0.8 * g1 + 0.6 * g2;
    const double x = config.iv_coef * z0 + 0.6 * z1 - 0.5 * z2 + e;
    const double y = config.true_beta * x - 0.4 * z1 + 0.5 * z2 + eps;
    s.t[i] = 1;
    s.u(i, 0) = z0;
    s.u(i, 1) = z1;
    s.u(i, 2) = z2;
    s.y(i, 0) = y;
    s.has_y[i] = 1;
  }
  for (int i = config.n1; i < n; ++i) {
    const double z0 = rng.next_normal();
    const double z1 = rng.next_normal();
    const double z2 = rng.next_normal();
    const double e = rng.next_normal();
    const double x = config.iv_coef * z0 + 0.6 * z1 - 0.5 * z2 + e;
    s.t[i] = 0;
    s.u(i, 0) = z0;
    s.u(i, 1) = z1;
    s.u(i, 2) = z2;
    s.x(i, 0) = x;
    s.has_x[i] = 1;
  }
  return s;
}

BasisSpec simulation_basis(bool correct) {
  BasisSpec spec;
  spec.add_intercept();
  if (correct) {
    spec.add_column(0, "z0").add_column(1, "z1").add_column(2, "z2");
  } else {
    spec.add_transform("w0", [](const Eigen::Ref<const Vec>& u) {
      return std::exp(-0.5 * u[0]) + 5.0;
    });
    spec.add_transform("w1", [](const Eigen::Ref<const Vec>& u) {
      return u[1] / (1.0 + 0.1 * std::exp(u[0])) + 10.0;
    });
    spec.add_transform("w2", [](const Eigen::Ref<const Vec>& u) {
      return std::exp(0.4 * u[2]) + 3.0;
    });
  }
  return spec;
}

const McRow& McTable::row(IvEstimator e) const {
  for (const auto& r : rows)
    if (r.estimator == e) return r;
  throw DataError("estimator missing from the Monte Carlo table");
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TSDC_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  return hw > 0 ? hw : 1;
}

namespace {

Mu3Method mu3_method_for(IvEstimator e) {
  switch (e) {
    case IvEstimator::OR: return Mu3Method::OR;
    case IvEstimator::IPW: return Mu3Method::IPW;
    case IvEstimator::AIPW: return Mu3Method::AIPW;
    case IvEstimator::REG: return Mu3Method::REG;
    case IvEstimator::LIK: return Mu3Method::LIK;
    case IvEstimator::AST: return Mu3Method::AST;
    default: throw DataError("estimator has no mu3 route");
  }
}

}  // namespace

McTable run_monte_carlo(const DgpConfig& config, const ModelCell& cell, const McOptions& opts) {
  if (opts.reps < 1) throw DataError("Monte Carlo needs at least one replicate");
  std::vector<IvEstimator> ests = opts.estimators;
  if (ests.empty())
    ests = {IvEstimator::TSIV, IvEstimator::TS2SLS, IvEstimator::OR,
            IvEstimator::IPW,  IvEstimator::AIPW,   IvEstimator::LIK};
  const int ne = static_cast<int>(ests.size());
  const int R = opts.reps;

  WeightPolicy policy;
  policy.clip = opts.clip_weights;

  // slots[e][r]: estimate of the first coefficient, NaN marks a failure
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> slots(ne, std::vector<double>(R, nan));

  const BasisSpec ps_basis = simulation_basis(cell.ps_correct);
  const BasisSpec or_basis = simulation_basis(cell.or_correct);

  bool needs_ps = false, needs_or = false;
  for (IvEstimator e : ests) {
    if (e == IvEstimator::IPW || e == IvEstimator::AIPW || e == IvEstimator::REG ||
        e == IvEstimator::LIK || e == IvEstimator::AST)
      needs_ps = true;
    if (e == IvEstimator::OR || e == IvEstimator::AIPW || e == IvEstimator::REG ||
        e == IvEstimator::LIK || e == IvEstimator::AST)
      needs_or = true;
  }

  auto run_rep = [&](int r) {
    const MergedSample s = generate(config, opts.seed, static_cast<std::uint64_t>(r));
    const IvProblem iv = make_iv_problem(s, 0, {1, 2});

    const DesignMatrix f_ps = build_design(s.u, ps_basis);
    std::optional<FittedPs> ps;
    std::optional<FittedOr> orf;
    if (needs_ps) {
      try {
        ps = fit_logistic(f_ps, s.t);
      } catch (const Error&) {
      }
    }
    if (needs_or) {
      try {
        orf = fit_or_linear(build_design(s.u, or_basis), s);
      } catch (const Error&) {
      }
    }
    TsivFits fits;
    fits.ps = ps ? &*ps : nullptr;
    fits.orf = orf ? &*orf : nullptr;
    fits.f = &f_ps;

    for (int e = 0; e < ne; ++e) {
      try {
        double b;
        if (ests[e] == IvEstimator::TSIV)
          b = tsiv_classic(iv)[0];
        else if (ests[e] == IvEstimator::TS2SLS)
          b = ts2sls(iv)[0];
        else
          b = estimate_beta(iv, mu3_method_for(ests[e]), fits, opts.include_h2, policy)
                  .beta[0];
        slots[e][r] = b;
      } catch (const Error&) {
        // counted as a failure below
      }
    }
  };

  const int nt = std::min(resolve_threads(opts.threads), R);
  if (nt <= 1) {
    for (int r = 0; r < R; ++r) run_rep(r);
  } else {
    std::atomic<int> next{0};
    auto worker = [&]() {
      for (;;) {
        const int r = next.fetch_add(1);
        if (r >= R) return;
        run_rep(r);
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (int i = 0; i < nt; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  McTable table;
  table.cell = cell;
  table.reps = R;
  for (int e = 0; e < ne; ++e) {
    McRow row;
    row.estimator = ests[e];
    std::vector<double> vals;
    vals.reserve(R);
    for (int r = 0; r < R; ++r)
      if (std::isfinite(slots[e][r])) vals.push_back(slots[e][r]);
    row.used = static_cast<int>(vals.size());
    row.failures = R - row.used;
    row.bias = row.used ? pairwise_mean(vals) - config.true_beta : nan;
    row.sd = row.used >= 2 ? pairwise_sd(vals) : nan;
    table.rows.push_back(std::move(row));
  }
  return table;
}

DgpConfig scenario_config(const std::string& name) {
  DgpConfig c;
  if (name == "table1") return c;
  if (name == "s1") {
    c.iv_coef = 0.8;
    return c;
  }
  if (name == "s2") {
    c.iv_coef = 0.6;
    return c;
  }
  if (name == "s3") {
    c.n1 = 500;
    c.n0 = 5000;
    return c;
  }
  throw DataError("unknown scenario '" + name + "' (expected table1, s1, s2 or s3)");
}

namespace {

double pairwise_sum_range(const double* xs, std::size_t n) {
  if (n <= 8) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += xs[i];
    return acc;
  }
  const std::size_t half = n / 2;
  return pairwise_sum_range(xs, half) + pairwise_sum_range(xs + half, n - half);
}

}  // namespace

double pairwise_sum(const std::vector<double>& xs) {
  return pairwise_sum_range(xs.data(), xs.size());
}

double pairwise_mean(const std::vector<double>& xs) {
  if (xs.empty()) throw DataError("mean of an empty sample");
  return pairwise_sum(xs) / static_cast<double>(xs.size());
}

double pairwise_sd(const std::vector<double>& xs) {
  if (xs.size() < 2) throw DataError("sd needs at least two values");
  const double m = pairwise_mean(xs);
  std::vector<double> sq(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - m) * (xs[i] - m);
  return std::sqrt(pairwise_sum(sq) / static_cast<double>(xs.size() - 1));
}

}  // namespace tsdc
