#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsdc/types.hpp"

namespace tsdc {

// Pooled two-sample data set.  Rows with t == 1 come from the primary sample
// (outcome y observed, x missing); rows with t == 0 come from the auxiliary
// sample (x observed, y missing).  u holds the covariates observed in both.
// y may also be absent everywhere when the target moment involves x only.
struct MergedSample {
  std::vector<int> t;
  Mat u;  // n x du
  Mat x;  // n x dx, rows valid where has_x
  Mat y;  // n x dy, rows valid where has_y
  std::vector<std::uint8_t> has_x, has_y;
  std::vector<std::string> u_names, x_names, y_names;

  int n() const { return static_cast<int>(t.size()); }
  int n1() const;
  int n0() const;
  bool y_observed() const;

  // Throws DataError unless: t is 0/1 with both groups nonempty, x is present
  // exactly on auxiliary rows or absent everywhere, y is present exactly on
  // primary rows or absent everywhere, and all stored values are finite.
  void validate() const;
};

struct CsvSchema {
  std::string t_col;
  std::vector<std::string> u_cols;
  std::vector<std::string> x_cols;  // may be empty
  std::vector<std::string> y_cols;  // may be empty
};

MergedSample ingest_csv(const std::string& path, const CsvSchema& schema);
void write_csv(const MergedSample& sample, const std::string& path);

// One column of a design matrix before evaluation.
struct Term {
  enum class Kind { Intercept, Column, Interaction, Transform };
  Kind kind = Kind::Intercept;
  int i = -1, j = -1;  // u-column indices for Column / Interaction
  std::string label;
  std::function<double(const Eigen::Ref<const Vec>&)> fn;  // Transform only
};

// Ordered list of design terms.  The mini-language accepted by parse() covers
// "1" (intercept), bare column names, and pairwise interactions "a:b".
struct BasisSpec {
  std::vector<Term> terms;

  static BasisSpec parse(const std::string& spec, const std::vector<std::string>& u_names);
  static BasisSpec intercept_and_columns(const std::vector<std::string>& u_names);

  BasisSpec& add_intercept();
  BasisSpec& add_column(int i, const std::string& label);
  BasisSpec& add_interaction(int i, int j, const std::string& label);
  BasisSpec& add_transform(const std::string& label,
                           std::function<double(const Eigen::Ref<const Vec>&)> fn);

  int size() const { return static_cast<int>(terms.size()); }
  bool has_intercept() const;
  Vec eval_row(const Eigen::Ref<const Vec>& u) const;
  Mat eval(const Mat& u) const;  // n x size()
  std::vector<std::string> labels() const;
};

// Evaluated basis with numerically dependent columns removed.  kept/dropped
// index into spec.terms; an intercept term is always retained.
struct DesignMatrix {
  Mat values;  // n x kept.size()
  std::vector<std::string> labels;
  std::vector<int> kept, dropped;
  int intercept_col = -1;  // position of the intercept among kept columns

  int p() const { return static_cast<int>(kept.size()); }
};

// Greedy rank filter: walks columns in order (the intercept first, when
// given) and keeps a column iff its residual after projection on the columns
// kept so far exceeds tol times its own norm.  Returns kept indices, sorted.
std::vector<int> independent_columns(const Mat& cols, double tol, int intercept_col = -1);

DesignMatrix build_design(const Mat& u, const BasisSpec& spec, double tol = 1e-8);

}  // namespace tsdc
