#include "tsdc/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tsdc {

int MergedSample::n1() const {
  return static_cast<int>(std::count(t.begin(), t.end(), 1));
}

int MergedSample::n0() const {
  return static_cast<int>(std::count(t.begin(), t.end(), 0));
}

bool MergedSample::y_observed() const {
  return std::any_of(has_y.begin(), has_y.end(), [](std::uint8_t b) { return b != 0; });
}

void MergedSample::validate() const {
  const int nn = n();
  if (nn == 0) throw DataError("sample is empty");
  if (u.rows() != nn) throw DataError("u row count does not match t");
  if (static_cast<int>(has_x.size()) != nn || static_cast<int>(has_y.size()) != nn)
    throw DataError("presence masks do not match t");
  if (x.cols() > 0 && x.rows() != nn) throw DataError("x row count does not match t");
  if (y.cols() > 0 && y.rows() != nn) throw DataError("y row count does not match t");

  const bool any_y = y_observed();
  const bool any_x =
      std::any_of(has_x.begin(), has_x.end(), [](std::uint8_t b) { return b != 0; });
  for (int i = 0; i < nn; ++i) {
    if (t[i] != 0 && t[i] != 1)
      throw DataError("t must be 0 or 1 (row " + std::to_string(i) + ")");
    const bool aux = t[i] == 0;
    if (any_x && static_cast<bool>(has_x[i]) != aux)
      throw DataError("x must be present exactly on auxiliary rows (row " +
                      std::to_string(i) + ")");
    if (any_y && static_cast<bool>(has_y[i]) != !aux)
      throw DataError("y must be present exactly on primary rows (row " +
                      std::to_string(i) + ")");
    for (int j = 0; j < u.cols(); ++j)
      if (!std::isfinite(u(i, j))) throw DataError("non-finite covariate value");
    if (has_x[i])
      for (int j = 0; j < x.cols(); ++j)
        if (!std::isfinite(x(i, j))) throw DataError("non-finite x value");
    if (has_y[i])
      for (int j = 0; j < y.cols(); ++j)
        if (!std::isfinite(y(i, j))) throw DataError("non-finite y value");
  }
  if (n1() == 0) throw DataError("no primary rows (t = 1)");
  if (n0() == 0) throw DataError("no auxiliary rows (t = 0)");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_number(const std::string& field, int row, const std::string& col) {
  const std::string v = trim(field);
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw DataError("non-numeric value '" + v + "' in column " + col + ", data row " +
                    std::to_string(row));
  }
  if (pos != v.size())
    throw DataError("non-numeric value '" + v + "' in column " + col + ", data row " +
                    std::to_string(row));
  return d;
}

int find_column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == name) return static_cast<int>(j);
  throw DataError("column '" + name + "' not found in CSV header");
}

}  // namespace

MergedSample ingest_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file '" + path + "'");
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  const int tcol = find_column(header, schema.t_col);
  std::vector<int> ucols, xcols, ycols;
  for (const auto& c : schema.u_cols) ucols.push_back(find_column(header, c));
  for (const auto& c : schema.x_cols) xcols.push_back(find_column(header, c));
  for (const auto& c : schema.y_cols) ycols.push_back(find_column(header, c));

  MergedSample s;
  s.u_names = schema.u_cols;
  s.x_names = schema.x_cols;
  s.y_names = schema.y_cols;

  std::vector<std::vector<double>> urows, xrows, yrows;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw DataError("row " + std::to_string(row) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(header.size()));

    const double tval = parse_number(fields[tcol], row, schema.t_col);
    if (tval != 0.0 && tval != 1.0)
      throw DataError("t must be 0 or 1, got '" + trim(fields[tcol]) + "' in data row " +
                      std::to_string(row));
    s.t.push_back(static_cast<int>(tval));

    std::vector<double> uv;
    for (std::size_t j = 0; j < ucols.size(); ++j) {
      if (trim(fields[ucols[j]]).empty())
        throw DataError("missing covariate " + schema.u_cols[j] + " in data row " +
                        std::to_string(row));
      uv.push_back(parse_number(fields[ucols[j]], row, schema.u_cols[j]));
    }
    urows.push_back(uv);

    bool x_present = false, x_missing = false;
    std::vector<double> xv;
    for (std::size_t j = 0; j < xcols.size(); ++j) {
      if (trim(fields[xcols[j]]).empty()) {
        x_missing = true;
      } else {
        x_present = true;
        xv.push_back(parse_number(fields[xcols[j]], row, schema.x_cols[j]));
      }
    }
    if (x_present && x_missing)
      throw DataError("partially missing x in data row " + std::to_string(row));
    s.has_x.push_back(x_present ? 1 : 0);
    xrows.push_back(x_present ? xv : std::vector<double>(xcols.size(), 0.0));

    bool y_present = false, y_missing = false;
    std::vector<double> yv;
    for (std::size_t j = 0; j < ycols.size(); ++j) {
      if (trim(fields[ycols[j]]).empty()) {
        y_missing = true;
      } else {
        y_present = true;
        yv.push_back(parse_number(fields[ycols[j]], row, schema.y_cols[j]));
      }
    }
    if (y_present && y_missing)
      throw DataError("partially missing y in data row " + std::to_string(row));
    s.has_y.push_back(y_present ? 1 : 0);
    yrows.push_back(y_present ? yv : std::vector<double>(ycols.size(), 0.0));
  }

  const int n = static_cast<int>(s.t.size());
  s.u.resize(n, static_cast<int>(ucols.size()));
  s.x.resize(n, static_cast<int>(xcols.size()));
  s.y.resize(n, static_cast<int>(ycols.size()));
  for (int i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ucols.size(); ++j) s.u(i, j) = urows[i][j];
    for (std::size_t j = 0; j < xcols.size(); ++j) s.x(i, j) = xrows[i][j];
    for (std::size_t j = 0; j < ycols.size(); ++j) s.y(i, j) = yrows[i][j];
  }
  s.validate();
  return s;
}

void write_csv(const MergedSample& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");

  out << "t";
  for (const auto& nm : s.u_names) out << "," << nm;
  for (const auto& nm : s.x_names) out << "," << nm;
  for (const auto& nm : s.y_names) out << "," << nm;
  out << "\n";

  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (int i = 0; i < s.n(); ++i) {
    out << s.t[i];
    for (int j = 0; j < s.u.cols(); ++j) {
      out << ",";
      put(s.u(i, j));
    }
    for (int j = 0; j < s.x.cols(); ++j) {
      out << ",";
      if (s.has_x[i]) put(s.x(i, j));
    }
    for (int j = 0; j < s.y.cols(); ++j) {
      out << ",";
      if (s.has_y[i]) put(s.y(i, j));
    }
    out << "\n";
  }
}

BasisSpec& BasisSpec::add_intercept() {
  Term t;
  t.kind = Term::Kind::Intercept;
  t.label = "1";
  terms.push_back(std::move(t));
  return *this;
}

BasisSpec& BasisSpec::add_column(int i, const std::string& label) {
  Term t;
  t.kind = Term::Kind::Column;
  t.i = i;
  t.label = label;
  terms.push_back(std::move(t));
  return *this;
}

BasisSpec& BasisSpec::add_interaction(int i, int j, const std::string& label) {
  Term t;
  t.kind = Term::Kind::Interaction;
  t.i = i;
  t.j = j;
  t.label = label;
  terms.push_back(std::move(t));
  return *this;
}

BasisSpec& BasisSpec::add_transform(const std::string& label,
                                    std::function<double(const Eigen::Ref<const Vec>&)> fn) {
  Term t;
  t.kind = Term::Kind::Transform;
  t.label = label;
  t.fn = std::move(fn);
  terms.push_back(std::move(t));
  return *this;
}

bool BasisSpec::has_intercept() const {
  return std::any_of(terms.begin(), terms.end(),
                     [](const Term& t) { return t.kind == Term::Kind::Intercept; });
}

BasisSpec BasisSpec::parse(const std::string& spec, const std::vector<std::string>& u_names) {
  auto col_index = [&](const std::string& name) {
    for (std::size_t j = 0; j < u_names.size(); ++j)
      if (u_names[j] == name) return static_cast<int>(j);
    throw DataError("unknown column '" + name + "' in term list");
  };

  BasisSpec b;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) throw DataError("empty term in '" + spec + "'");
    if (tok == "1") {
      b.add_intercept();
      continue;
    }
    const auto colon = tok.find(':');
    if (colon != std::string::npos) {
      const std::string a = trim(tok.substr(0, colon));
      const std::string c = trim(tok.substr(colon + 1));
      if (a.empty() || c.empty() || c.find(':') != std::string::npos)
        throw DataError("bad interaction term '" + tok + "'");
      b.add_interaction(col_index(a), col_index(c), a + ":" + c);
      continue;
    }
    b.add_column(col_index(tok), tok);
  }
  if (b.terms.empty()) throw DataError("empty term list");
  return b;
}

BasisSpec BasisSpec::intercept_and_columns(const std::vector<std::string>& u_names) {
  BasisSpec b;
  b.add_intercept();
  for (std::size_t j = 0; j < u_names.size(); ++j)
    b.add_column(static_cast<int>(j), u_names[j]);
  return b;
}

Vec BasisSpec::eval_row(const Eigen::Ref<const Vec>& u) const {
  Vec out(size());
  for (int j = 0; j < size(); ++j) {
    const Term& t = terms[j];
    switch (t.kind) {
      case Term::Kind::Intercept:
        out[j] = 1.0;
        break;
      case Term::Kind::Column:
        out[j] = u[t.i];
        break;
      case Term::Kind::Interaction:
        out[j] = u[t.i] * u[t.j];
        break;
      case Term::Kind::Transform:
        out[j] = t.fn(u);
        break;
    }
  }
  return out;
}

Mat BasisSpec::eval(const Mat& u) const {
  for (const Term& t : terms) {
    const bool bad_i =
        (t.kind == Term::Kind::Column || t.kind == Term::Kind::Interaction) && t.i >= u.cols();
    const bool bad_j = t.kind == Term::Kind::Interaction && t.j >= u.cols();
    if (bad_i || bad_j)
      throw DataError("term '" + t.label + "' references a missing column");
  }
  Mat out(u.rows(), size());
  for (int i = 0; i < u.rows(); ++i) out.row(i) = eval_row(u.row(i)).transpose();
  return out;
}

std::vector<std::string> BasisSpec::labels() const {
  std::vector<std::string> out;
  out.reserve(terms.size());
  for (const Term& t : terms) out.push_back(t.label);
  return out;
}

std::vector<int> independent_columns(const Mat& cols, double tol, int intercept_col) {
  const int n = static_cast<int>(cols.rows());
  const int p = static_cast<int>(cols.cols());
  std::vector<int> order;
  if (intercept_col >= 0) order.push_back(intercept_col);
  for (int j = 0; j < p; ++j)
    if (j != intercept_col) order.push_back(j);

  std::vector<int> kept;
  Mat q(n, 0);
  for (int j : order) {
    Vec r = cols.col(j);
    const double base = r.norm();
    if (base == 0.0) continue;
    // two passes of Gram-Schmidt for numerical reliability
    for (int pass = 0; pass < 2; ++pass)
      for (int m = 0; m < q.cols(); ++m) r -= q.col(m).dot(r) * q.col(m);
    if (r.norm() > tol * base) {
      kept.push_back(j);
      q.conservativeResize(n, q.cols() + 1);
      q.col(q.cols() - 1) = r / r.norm();
    }
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

DesignMatrix build_design(const Mat& u, const BasisSpec& spec, double tol) {
  if (u.rows() == 0) throw DataError("cannot build a design on zero rows");
  const Mat full = spec.eval(u);
  int icol = -1;
  for (int j = 0; j < spec.size(); ++j)
    if (spec.terms[j].kind == Term::Kind::Intercept) {
      icol = j;
      break;
    }

  const std::vector<int> kept = independent_columns(full, tol, icol);
  if (kept.empty()) throw DataError("all design columns are degenerate");

  DesignMatrix d;
  d.kept = kept;
  d.values.resize(u.rows(), static_cast<int>(kept.size()));
  for (std::size_t m = 0; m < kept.size(); ++m) {
    d.values.col(m) = full.col(kept[m]);
    d.labels.push_back(spec.terms[kept[m]].label);
    if (kept[m] == icol) d.intercept_col = static_cast<int>(m);
  }
  for (int j = 0; j < spec.size(); ++j)
    if (std::find(kept.begin(), kept.end(), j) == kept.end()) d.dropped.push_back(j);
  return d;
}

}  // namespace tsdc
