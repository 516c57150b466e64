#include "memoe/cli_io.hpp"

#include "memoe/inference.hpp"
#include "memoe/parallel.hpp"
#include "memoe/sim_bench.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <unistd.h>

namespace memoe {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw std::invalid_argument("key '" + key + "': expected a boolean, got '" + v + "'");
}

bool parse_number(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* begin = s.c_str();
    char* end = nullptr;
    errno = 0;
    out = std::strtod(begin, &end);
    return end == begin + s.size() && errno != ERANGE;
}

long long parse_integer(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty())
        throw std::invalid_argument("key '" + key + "': expected an integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    if (!parse_number(v, out))
        throw std::invalid_argument("key '" + key + "': expected a number, got '" + v + "'");
    return out;
}

std::string escape_id(const std::string& s) {
    std::string out;
    for (unsigned char c : s) {
        if (c == '%' || c <= ' ' || c == 0x7f) {
            char buf[4];
            std::snprintf(buf, sizeof buf, "%%%02X", c);
            out += buf;
        } else {
            out += static_cast<char>(c);
        }
    }
    return out;
}

std::string unescape_id(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%') {
            if (i + 2 >= s.size()) throw ArchiveError("malformed subject id escape");
            out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
            i += 2;
        } else {
            out += s[i];
        }
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------- formatting

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// ---------------------------------------------------------------- schema

void LongCsvSchema::validate() const {
    if (subject_col.empty()) throw std::invalid_argument("schema: subject column is required");
    if (y_col.empty()) throw std::invalid_argument("schema: y column is required");
    if (x_cols.empty() && !add_intercept_x)
        throw std::invalid_argument("schema: x needs at least one column or intercept_x");
    if (z_cols.empty() && !add_intercept_z)
        throw std::invalid_argument("schema: z needs at least one column or intercept_z");
    if (w_cols.empty() && !add_intercept_w)
        throw std::invalid_argument("schema: w needs at least one column or intercept_w");
    auto no_repeats = [](const std::vector<std::string>& v, const char* what) {
        std::set<std::string> seen;
        for (const auto& c : v)
            if (!seen.insert(c).second)
                throw std::invalid_argument(std::string("schema: column '") + c +
                                            "' repeated in " + what);
    };
    no_repeats(x_cols, "x");
    no_repeats(z_cols, "z");
    no_repeats(w_cols, "w");
    std::map<std::string, std::string> role;
    auto claim = [&](const std::string& c, const std::string& r) {
        auto [it, fresh] = role.emplace(c, r);
        if (fresh) return;
        const bool xz = (it->second == "x" && r == "z") || (it->second == "z" && r == "x");
        if (!xz)
            throw std::invalid_argument("schema: column '" + c + "' used as both " + it->second +
                                        " and " + r);
    };
    claim(subject_col, "subject");
    claim(y_col, "y");
    for (const auto& c : x_cols) claim(c, "x");
    for (const auto& c : z_cols) claim(c, "z");
    for (const auto& c : w_cols) claim(c, "w");
}

std::map<std::string, std::string> parse_key_values(std::istream& in) {
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw std::invalid_argument("line " + std::to_string(lineno) + ": empty key");
        if (!out.emplace(key, trim(line.substr(eq + 1))).second)
            throw std::invalid_argument("line " + std::to_string(lineno) + ": duplicate key '" +
                                        key + "'");
    }
    return out;
}

LongCsvSchema parse_schema(std::istream& in) {
    LongCsvSchema s;
    for (const auto& [key, value] : parse_key_values(in)) {
        if (key == "subject") s.subject_col = value;
        else if (key == "y") s.y_col = value;
        else if (key == "x") s.x_cols = split_list(value);
        else if (key == "z") s.z_cols = split_list(value);
        else if (key == "w") s.w_cols = split_list(value);
        else if (key == "intercept_x") s.add_intercept_x = parse_bool(key, value);
        else if (key == "intercept_z") s.add_intercept_z = parse_bool(key, value);
        else if (key == "intercept_w") s.add_intercept_w = parse_bool(key, value);
        else if (key == "gating") s.gating = parse_gating_features(value);
        else throw std::invalid_argument("schema: unknown key '" + key + "'");
    }
    s.validate();
    return s;
}

LongCsvSchema load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open schema file '" + path + "'");
    return parse_schema(in);
}

// ---------------------------------------------------------------- CSV

CsvError::CsvError(const std::string& what, std::size_t row_, std::string column_)
    : std::runtime_error(what + " (row " + std::to_string(row_) +
                         (column_.empty() ? "" : ", column '" + column_ + "'") + ")"),
      row(row_),
      column(std::move(column_)) {}

std::size_t CsvTable::column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw CsvError("missing column", 0, name);
    return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(std::istream& in) {
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, field_started = false;
    std::size_t i = 0;
    auto end_field = [&] {
        rec.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        if (!(rec.size() == 1 && rec[0].empty())) records.push_back(std::move(rec));
        rec.clear();
    };
    while (i < text.size()) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    i += 2;
                    continue;
                }
                quoted = false;
            } else {
                field += c;
            }
            ++i;
            continue;
        }
        if (c == '"' && !field_started && field.empty()) {
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n' || c == '\r') {
            end_record();
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
        } else {
            field += c;
            field_started = true;
        }
        ++i;
    }
    if (quoted) throw CsvError("unterminated quoted field", records.size(), "");
    if (field_started || !field.empty() || !rec.empty()) end_record();
    if (records.empty()) throw CsvError("empty file", 0, "");

    CsvTable t;
    t.header = std::move(records.front());
    for (auto& h : t.header) h = trim(h);
    std::set<std::string> seen;
    for (const auto& h : t.header)
        if (!seen.insert(h).second) throw CsvError("duplicate header", 0, h);
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != t.header.size())
            throw CsvError("expected " + std::to_string(t.header.size()) + " fields, found " +
                               std::to_string(records[r].size()),
                           r, "");
        t.rows.push_back(std::move(records[r]));
    }
    return t;
}

CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return read_csv(in);
}

std::vector<CovariateRow> bind_rows(const CsvTable& table, const LongCsvSchema& schema,
                                    bool require_y) {
    schema.validate();
    if (table.rows.empty()) throw CsvError("no data rows", 0, "");
    auto cols = [&](const std::vector<std::string>& names) {
        std::vector<std::size_t> idx;
        for (const auto& n : names) idx.push_back(table.column(n));
        return idx;
    };
    const std::size_t subj = table.column(schema.subject_col);
    std::optional<std::size_t> ycol;
    if (require_y) {
        ycol = table.column(schema.y_col);
    } else if (std::find(table.header.begin(), table.header.end(), schema.y_col) !=
               table.header.end()) {
        ycol = table.column(schema.y_col);
    }
    const auto xc = cols(schema.x_cols), zc = cols(schema.z_cols), wc = cols(schema.w_cols);

    std::vector<CovariateRow> out;
    out.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        auto number = [&](std::size_t c) {
            const std::string cell = trim(row[c]);
            if (cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan")
                throw CsvError("missing value", r + 1, table.header[c]);
            double v = 0.0;
            if (!parse_number(cell, v) || !std::isfinite(v))
                throw CsvError("non-numeric value '" + cell + "'", r + 1, table.header[c]);
            return v;
        };
        auto design = [&](const std::vector<std::size_t>& idx, bool intercept) {
            const int off = intercept ? 1 : 0;
            Vec v(static_cast<Eigen::Index>(idx.size()) + off);
            if (intercept) v[0] = 1.0;
            for (std::size_t c = 0; c < idx.size(); ++c) v[c + off] = number(idx[c]);
            return v;
        };
        CovariateRow cr;
        cr.row_id = r + 1;
        cr.subject = trim(row[subj]);
        if (cr.subject.empty()) throw CsvError("missing subject id", r + 1, table.header[subj]);
        cr.pt.x = design(xc, schema.add_intercept_x);
        cr.pt.z = design(zc, schema.add_intercept_z);
        cr.pt.w = design(wc, schema.add_intercept_w);
        if (ycol) cr.y = number(*ycol);
        out.push_back(std::move(cr));
    }
    return out;
}

Dataset dataset_from_table(const CsvTable& table, const LongCsvSchema& schema) {
    const std::vector<CovariateRow> rows = bind_rows(table, schema, true);
    std::vector<Subject> subjects;
    std::unordered_map<std::string, std::size_t> index;
    for (const CovariateRow& r : rows) {
        auto [it, fresh] = index.emplace(r.subject, subjects.size());
        if (fresh) subjects.push_back(Subject{r.subject, r.pt.w, {}});
        Subject& s = subjects[it->second];
        if (s.w != r.pt.w) {
            const int off = schema.add_intercept_w ? 1 : 0;
            std::string col;
            for (std::size_t c = 0; c < schema.w_cols.size(); ++c)
                if (s.w[c + off] != r.pt.w[c + off]) {
                    col = schema.w_cols[c];
                    break;
                }
            throw CsvError("w varies within subject '" + r.subject + "'", r.row_id, col);
        }
        s.obs.push_back(Observation{*r.y, r.pt.x, r.pt.z});
    }
    return Dataset(std::move(subjects), schema.gating);
}

Dataset load_long_csv(const std::string& path, const LongCsvSchema& schema) {
    return dataset_from_table(read_csv_file(path), schema);
}

// ---------------------------------------------------------------- archive

ModelArchive ModelArchive::from_fit(const FittedModel& fitted) {
    ModelArchive a;
    a.params = fitted.params;
    a.sums = fitted.sums;
    a.restriction = fitted.restriction;
    a.converged = fitted.converged;
    a.em_iters = fitted.em_iters;
    a.best_of = fitted.best_of;
    a.loglik_trace = fitted.loglik_trace;
    a.diag = fitted.diag;
    a.subject_ids = fitted.subject_ids;
    for (const auto& p : fitted.posteriors) a.subject_modes.push_back(p.u_hat);
    return a;
}

FittedModel ModelArchive::to_fitted() const {
    FittedModel f;
    f.params = params;
    f.sums = sums;
    f.restriction = restriction;
    f.converged = converged;
    f.em_iters = em_iters;
    f.best_of = best_of;
    f.loglik_trace = loglik_trace;
    f.diag = diag;
    f.subject_ids = subject_ids;
    f.posteriors.resize(subject_modes.size());
    for (std::size_t i = 0; i < subject_modes.size(); ++i) f.posteriors[i].u_hat = subject_modes[i];
    return f;
}

const Vec* ModelArchive::mode_of(const std::string& subject_id) const {
    for (std::size_t i = 0; i < subject_ids.size(); ++i)
        if (subject_ids[i] == subject_id) return &subject_modes[i];
    return nullptr;
}

namespace {

void write_matrix(std::ostream& out, const std::string& name, const Mat& m) {
    out << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            out << (c ? " " : "") << format_double(m(r, c));
        out << '\n';
    }
}

void write_vector(std::ostream& out, const std::string& name, const std::vector<double>& v) {
    out << "vector " << name << ' ' << v.size() << '\n';
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_double(v[i]);
    out << '\n';
}

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

class ArchiveReader {
public:
    explicit ArchiveReader(std::istream& in) : in_(in) {}

    std::vector<std::string> line() {
        std::string s;
        if (!std::getline(in_, s)) fail("unexpected end of archive");
        ++lineno_;
        std::istringstream ss(s);
        std::vector<std::string> tok;
        for (std::string t; ss >> t;) tok.push_back(t);
        return tok;
    }

    std::string keyed(const std::string& key) {
        const auto tok = line();
        if (tok.size() != 2 || tok[0] != key) fail("expected '" + key + " <value>'");
        return tok[1];
    }

    long long keyed_int(const std::string& key) {
        try {
            return parse_integer(key, keyed(key));
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
    }

    double number(const std::string& s) {
        double v = 0.0;
        if (!parse_number(s, v)) fail("bad number '" + s + "'");
        return v;
    }

    std::vector<double> numbers(std::size_t n) {
        const auto tok = line();
        if (tok.size() != n)
            fail("expected " + std::to_string(n) + " values, found " + std::to_string(tok.size()));
        std::vector<double> out;
        for (const auto& t : tok) out.push_back(number(t));
        return out;
    }

    Mat matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        const auto tok = line();
        if (tok.size() != 4 || tok[0] != "matrix" || tok[1] != name ||
            tok[2] != std::to_string(rows) || tok[3] != std::to_string(cols))
            fail("expected block 'matrix " + name + " " + std::to_string(rows) + " " +
                 std::to_string(cols) + "'");
        Mat m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const auto v = numbers(static_cast<std::size_t>(cols));
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[c];
        }
        return m;
    }

    std::vector<double> vector(const std::string& name) {
        const auto tok = line();
        if (tok.size() != 3 || tok[0] != "vector" || tok[1] != name)
            fail("expected block 'vector " + name + " <n>'");
        long long n = 0;
        try {
            n = parse_integer(name, tok[2]);
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
        if (n < 0) fail("negative length");
        if (n == 0) {
            line();
            return {};
        }
        return numbers(static_cast<std::size_t>(n));
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw ArchiveError("archive line " + std::to_string(lineno_) + ": " + what);
    }

private:
    std::istream& in_;
    int lineno_ = 0;
};

}  // namespace

void write_model(const ModelArchive& a, std::ostream& out) {
    const ModelParams& p = a.params;
    out << "memoe-archive " << a.version << '\n';
    out << "K " << p.K() << "\np " << p.p() << "\nq " << p.q() << "\nd " << p.d() << "\ng "
        << p.g() << '\n';
    out << "gating " << to_string(p.gating) << '\n';
    out << "restriction " << to_string(a.restriction) << '\n';
    out << "converged " << (a.converged ? 1 : 0) << '\n';
    out << "em_iters " << a.em_iters << '\n';
    out << "best_of " << a.best_of << '\n';
    write_matrix(out, "alpha", p.alpha);
    write_matrix(out, "beta", p.beta);
    write_vector(out, "sigma2", to_std(p.sigma2));
    write_matrix(out, "kappa", p.kappa);
    write_matrix(out, "Sigma", p.Sigma);
    for (int k = 0; k < p.K(); ++k)
        write_matrix(out, "expert_gram." + std::to_string(k), a.sums.expert_gram[k]);
    write_matrix(out, "w_gram", a.sums.w_gram);
    write_vector(out, "loglik_trace", a.loglik_trace);
    out << "diag max_rel_dip " << format_double(a.diag.max_rel_dip) << '\n';
    out << "diag dip_warnings " << a.diag.dip_warnings << '\n';
    out << "diag unconverged_modes " << a.diag.unconverged_modes << '\n';
    out << "diag floored_modes " << a.diag.floored_modes << '\n';
    out << "diag ridge_warnings " << a.diag.ridge_warnings << '\n';
    out << "diag gating_clamps " << a.diag.gating_clamps << '\n';
    std::vector<double> deg(a.diag.degenerate_experts.begin(), a.diag.degenerate_experts.end());
    write_vector(out, "degenerate_experts", deg);
    out << "subjects " << a.subject_ids.size() << '\n';
    for (std::size_t i = 0; i < a.subject_ids.size(); ++i) {
        out << escape_id(a.subject_ids[i]);
        for (Eigen::Index c = 0; c < a.subject_modes[i].size(); ++c)
            out << ' ' << format_double(a.subject_modes[i][c]);
        out << '\n';
    }
    out << "end\n";
}

ModelArchive read_model(std::istream& in) {
    ArchiveReader rd(in);
    ModelArchive a;
    {
        const auto tok = rd.line();
        if (tok.size() != 2 || tok[0] != "memoe-archive") rd.fail("not a model archive");
        if (tok[1] != std::to_string(kArchiveVersion))
            rd.fail("unsupported archive version " + tok[1] + " (expected " +
                    std::to_string(kArchiveVersion) + ")");
    }
    const long long K = rd.keyed_int("K"), p = rd.keyed_int("p"), q = rd.keyed_int("q"),
                    d = rd.keyed_int("d"), g = rd.keyed_int("g");
    if (K < 1 || p < 1 || q < 1 || d < 1 || g < 1 || K > kMaxExperts) rd.fail("invalid dimensions");
    ModelParams& m = a.params;
    try {
        m.gating = parse_gating_features(rd.keyed("gating"));
        const std::string r = rd.keyed("restriction");
        if (r == "memoe") a.restriction = Restriction::none;
        else if (r == "remoe") a.restriction = Restriction::remoe;
        else if (r == "moe") a.restriction = Restriction::moe;
        else rd.fail("unknown restriction '" + r + "'");
    } catch (const std::invalid_argument& e) {
        rd.fail(e.what());
    }
    if (gating_dim(Dims{static_cast<int>(p), static_cast<int>(q), static_cast<int>(d)},
                   m.gating) != g)
        rd.fail("gating dimension disagrees with p, q and the gating policy");
    a.converged = rd.keyed_int("converged") != 0;
    a.em_iters = static_cast<int>(rd.keyed_int("em_iters"));
    a.best_of = static_cast<int>(rd.keyed_int("best_of"));
    m.alpha = rd.matrix("alpha", K, g);
    m.beta = rd.matrix("beta", K, p);
    const auto s2 = rd.vector("sigma2");
    if (static_cast<long long>(s2.size()) != K) rd.fail("sigma2 length differs from K");
    m.sigma2 = Eigen::Map<const Vec>(s2.data(), K);
    m.kappa = rd.matrix("kappa", q, d);
    m.Sigma = rd.matrix("Sigma", q, q);
    for (long long k = 0; k < K; ++k)
        a.sums.expert_gram.push_back(rd.matrix("expert_gram." + std::to_string(k), p, p));
    a.sums.w_gram = rd.matrix("w_gram", d, d);
    a.loglik_trace = rd.vector("loglik_trace");
    auto diag_value = [&](const std::string& name) {
        const auto tok = rd.line();
        if (tok.size() != 3 || tok[0] != "diag" || tok[1] != name)
            rd.fail("expected 'diag " + name + " <value>'");
        return rd.number(tok[2]);
    };
    a.diag.max_rel_dip = diag_value("max_rel_dip");
    a.diag.dip_warnings = static_cast<int>(diag_value("dip_warnings"));
    a.diag.unconverged_modes = static_cast<int>(diag_value("unconverged_modes"));
    a.diag.floored_modes = static_cast<int>(diag_value("floored_modes"));
    a.diag.ridge_warnings = static_cast<int>(diag_value("ridge_warnings"));
    a.diag.gating_clamps = static_cast<int>(diag_value("gating_clamps"));
    for (double v : rd.vector("degenerate_experts")) a.diag.degenerate_experts.push_back(static_cast<int>(v));
    const long long n = rd.keyed_int("subjects");
    if (n < 0) rd.fail("negative subject count");
    for (long long i = 0; i < n; ++i) {
        const auto tok = rd.line();
        if (static_cast<long long>(tok.size()) != q + 1) rd.fail("malformed subject mode row");
        a.subject_ids.push_back(unescape_id(tok[0]));
        Vec u(q);
        for (long long c = 0; c < q; ++c) u[c] = rd.number(tok[c + 1]);
        a.subject_modes.push_back(u);
    }
    if (rd.line() != std::vector<std::string>{"end"}) rd.fail("expected 'end'");

    if (m.Sigma != m.Sigma.transpose()) rd.fail("Sigma is not symmetric");
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        rd.fail(e.what());
    }
    for (const Mat& G : a.sums.expert_gram)
        if (G != G.transpose() || !G.allFinite()) rd.fail("expert Gram matrix is not symmetric");
    if (a.sums.w_gram != a.sums.w_gram.transpose() || !a.sums.w_gram.allFinite())
        rd.fail("w Gram matrix is not symmetric");
    return a;
}

void save_model(const ModelArchive& archive, const std::string& path) {
    std::ostringstream ss;
    write_model(archive, ss);
    const std::string tmp = path + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        out << ss.str();
        if (!out.flush()) throw std::runtime_error("write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

ModelArchive load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model '" + path + "'");
    return read_model(in);
}

// ---------------------------------------------------------------- config

void apply_config(FitConfig& cfg, const std::string& key, const std::string& v) {
    auto as_int = [&] { return static_cast<int>(parse_integer(key, v)); };
    if (key == "K" || key == "k") cfg.K = as_int();
    else if (key == "max_em_iters") cfg.max_em_iters = as_int();
    else if (key == "em_rel_tol") cfg.em_rel_tol = parse_real(key, v);
    else if (key == "n_starts") cfg.n_starts = as_int();
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_integer(key, v));
    else if (key == "sigma2_floor") cfg.sigma2_floor = parse_real(key, v);
    else if (key == "sigma_eig_floor") cfg.sigma_eig_floor = parse_real(key, v);
    else if (key == "mode_tol") cfg.mode_tol = parse_real(key, v);
    else if (key == "mode_max_iters") cfg.mode_max_iters = as_int();
    else if (key == "gating_newton_iters") cfg.gating_newton_iters = as_int();
    else if (key == "threads") cfg.threads = as_int();
    else if (key == "restriction") {
        if (v == "memoe" || v == "none") cfg.restriction = Restriction::none;
        else if (v == "remoe") cfg.restriction = Restriction::remoe;
        else if (v == "moe") cfg.restriction = Restriction::moe;
        else throw std::invalid_argument("key 'restriction': unknown value '" + v + "'");
    } else {
        throw std::invalid_argument("unknown config key '" + key + "'");
    }
}

// ---------------------------------------------------------------- commands

namespace {

const char* const kConfigKeys[] = {"K",           "max_em_iters",   "em_rel_tol",
                                   "n_starts",    "seed",           "sigma2_floor",
                                   "sigma_eig_floor", "mode_tol",   "mode_max_iters",
                                   "gating_newton_iters", "restriction", "threads"};

std::string config_value(const FitConfig& cfg, const std::string& key) {
    if (key == "K") return std::to_string(cfg.K);
    if (key == "max_em_iters") return std::to_string(cfg.max_em_iters);
    if (key == "em_rel_tol") return format_double(cfg.em_rel_tol);
    if (key == "n_starts") return std::to_string(cfg.n_starts);
    if (key == "seed") return std::to_string(cfg.seed);
    if (key == "sigma2_floor") return format_double(cfg.sigma2_floor);
    if (key == "sigma_eig_floor") return format_double(cfg.sigma_eig_floor);
    if (key == "mode_tol") return format_double(cfg.mode_tol);
    if (key == "mode_max_iters") return std::to_string(cfg.mode_max_iters);
    if (key == "gating_newton_iters") return std::to_string(cfg.gating_newton_iters);
    if (key == "restriction") return to_string(cfg.restriction);
    if (key == "threads") return std::to_string(cfg.threads);
    return "";
}

/// Layered FitConfig: built-in default < config file < command flag.
struct LayeredConfig {
    FitConfig cfg;
    std::map<std::string, std::string> source;

    LayeredConfig() {
        cfg.threads = default_threads();
        for (const char* k : kConfigKeys) source[k] = "default";
    }
    void set(const std::string& key, const std::string& value, const std::string& from) {
        apply_config(cfg, key, value);
        source[key == "k" ? "K" : key] = from;
    }
    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
        for (const auto& [k, v] : parse_key_values(in)) set(k, v, "file");
    }
};

/// Output files staged in memory and committed by temp file + rename.
class Outputs {
public:
    void commit(const std::string& path, const std::string& content) {
        const std::string tmp = path + ".tmp." + std::to_string(::getpid());
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw std::runtime_error("cannot write '" + path + "'");
            out << content;
            if (!out.flush()) {
                std::filesystem::remove(tmp);
                throw std::runtime_error("write to '" + path + "' failed");
            }
        }
        std::filesystem::rename(tmp, path);
        written_.push_back(path);
    }
    void rollback() noexcept {
        for (const auto& p : written_) {
            std::error_code ec;
            std::filesystem::remove(p, ec);
        }
        written_.clear();
    }

private:
    std::vector<std::string> written_;
};

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

template <class Body>
int guarded(CLI::App& app, const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err, Body&& body) {
    Outputs outputs;
    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
        body(outputs);
        return 0;
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        outputs.rollback();
        err << "error: usage: " << one_line(e.what()) << '\n';
        return 2;
    } catch (const std::exception& e) {
        outputs.rollback();
        err << "error: " << one_line(e.what()) << '\n';
        return 1;
    }
}

std::string points_path_for(const std::string& out) {
    const std::filesystem::path p(out);
    return (p.parent_path() / (p.stem().string() + "_points.csv")).string();
}

void emit(std::ostringstream& s, std::initializer_list<std::string> fields) {
    bool first = true;
    for (const auto& f : fields) {
        s << (first ? "" : ",") << csv_field(f);
        first = false;
    }
    s << '\n';
}

}  // namespace

int cmd_fit(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Fit the mixed-effects mixture-of-experts model", "memoe fit"};
    std::string data, schema, config, model, report;
    std::optional<int> k;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> restriction;
    bool no_sandwich = false;
    app.add_option("--data", data, "long-format CSV")->required();
    app.add_option("--schema", schema, "schema file")->required();
    app.add_option("--config", config, "key=value FitConfig file");
    app.add_option("--k", k, "number of experts");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--restriction", restriction, "memoe, remoe or moe");
    app.add_option("--model", model, "output model archive")->required();
    app.add_option("--out", report, "output fit report CSV")->required();
    app.add_flag("--no-sandwich", no_sandwich, "skip sandwich standard errors");
    return guarded(app, args, out, err, [&](Outputs& outputs) {
        LayeredConfig lc;
        if (!config.empty()) lc.load_file(config);
        if (k) lc.set("K", std::to_string(*k), "flag");
        if (seed) lc.set("seed", std::to_string(*seed), "flag");
        if (restriction) lc.set("restriction", *restriction, "flag");
        lc.cfg.validate();
        const Dataset ds = load_long_csv(data, load_schema(schema));
        const FittedModel fm = fit(ds, lc.cfg);

        std::ostringstream rep;
        rep << "section,name,index,value\n";
        for (const char* key : kConfigKeys)
            emit(rep, {"config", key, lc.source[key], config_value(lc.cfg, key)});
        emit(rep, {"summary", "loglik", "", format_double(fm.loglik())});
        emit(rep, {"summary", "converged", "", fm.converged ? "1" : "0"});
        emit(rep, {"summary", "em_iters", "", std::to_string(fm.em_iters)});
        emit(rep, {"summary", "best_start", "", std::to_string(fm.best_start)});
        emit(rep, {"summary", "n_subjects", "", std::to_string(ds.n_subjects())});
        emit(rep, {"summary", "n_obs", "", std::to_string(ds.total_obs())});
        for (std::size_t s = 0; s < fm.start_logliks.size(); ++s)
            emit(rep, {"start", "loglik", std::to_string(s), format_double(fm.start_logliks[s])});
        for (std::size_t t = 0; t < fm.loglik_trace.size(); ++t)
            emit(rep, {"trace", "loglik", std::to_string(t), format_double(fm.loglik_trace[t])});
        emit(rep, {"diagnostics", "max_rel_dip", "", format_double(fm.diag.max_rel_dip)});
        emit(rep, {"diagnostics", "dip_warnings", "", std::to_string(fm.diag.dip_warnings)});
        emit(rep, {"diagnostics", "unconverged_modes", "",
                   std::to_string(fm.diag.unconverged_modes)});
        emit(rep, {"diagnostics", "floored_modes", "", std::to_string(fm.diag.floored_modes)});
        emit(rep, {"diagnostics", "ridge_warnings", "", std::to_string(fm.diag.ridge_warnings)});
        emit(rep, {"diagnostics", "gating_clamps", "", std::to_string(fm.diag.gating_clamps)});
        for (int d : fm.diag.degenerate_experts)
            emit(rep, {"diagnostics", "degenerate_expert", "", std::to_string(d)});
        const ModelParams& p = fm.params;
        auto matrix_rows = [&](const std::string& name, const Mat& m) {
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c)
                    emit(rep, {"param", name + "." + std::to_string(r), std::to_string(c),
                               format_double(m(r, c))});
        };
        matrix_rows("alpha", p.alpha);
        matrix_rows("beta", p.beta);
        for (int kk = 0; kk < p.K(); ++kk)
            emit(rep, {"param", "sigma2", std::to_string(kk), format_double(p.sigma2[kk])});
        matrix_rows("kappa", p.kappa);
        matrix_rows("Sigma", p.Sigma);
        if (!no_sandwich) {
            try {
                const SandwichReport sw = sandwich(fm, ds, lc.cfg.threads);
                for (int kk = 0; kk < p.K(); ++kk) {
                    const ExpertSandwich& ex = sw.experts[kk];
                    const std::string sk = std::to_string(kk);
                    for (int c = 0; c < p.p(); ++c) {
                        const std::string sc = std::to_string(c);
                        emit(rep, {"sandwich", "se." + sk, sc, format_double(ex.se[c])});
                        emit(rep, {"sandwich", "wald_lo." + sk, sc, format_double(ex.wald_95[c].first)});
                        emit(rep, {"sandwich", "wald_hi." + sk, sc, format_double(ex.wald_95[c].second)});
                    }
                    emit(rep, {"sandwich", "j_asymmetry", sk, format_double(ex.j_asymmetry)});
                }
            } catch (const SandwichError& e) {
                emit(rep, {"sandwich", "error", "", one_line(e.what())});
            }
        }
        std::ostringstream arch;
        write_model(ModelArchive::from_fit(fm), arch);
        outputs.commit(model, arch.str());
        outputs.commit(report, rep.str());
        out << "fit: loglik " << format_double(fm.loglik()) << ", " << fm.em_iters
            << " EM iterations, converged " << (fm.converged ? "yes" : "no") << '\n';
    });
}

int cmd_predict(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Prediction sets and point predictions from a fitted model", "memoe predict"};
    std::string model, data, schema, sets, points;
    double q = 0.05;
    int cells = 2000;
    app.add_option("--model", model, "model archive")->required();
    app.add_option("--data", data, "covariate CSV")->required();
    app.add_option("--schema", schema, "schema file")->required();
    app.add_option("--q", q, "miscoverage level");
    app.add_option("--grid-cells", cells, "grid cells per prediction set");
    app.add_option("--out", sets, "prediction set CSV")->required();
    app.add_option("--points", points, "point prediction CSV (default <out>_points.csv)");
    return guarded(app, args, out, err, [&](Outputs& outputs) {
        const ModelArchive a = load_model(model);
        const FittedModel fm = a.to_fitted();
        const auto rows = bind_rows(read_csv_file(data), load_schema(schema), false);
        const Dims dims{a.params.p(), a.params.q(), a.params.d()};
        std::vector<PredictionSet> psets(rows.size());
        std::vector<double> yhat(rows.size());
        std::vector<int> known(rows.size(), 0);
        for (const auto& r : rows)
            if (r.pt.x.size() != dims.p || r.pt.z.size() != dims.q || r.pt.w.size() != dims.d)
                throw CsvError("covariates do not match the model dimensions", r.row_id, "");
        parallel_for(
            rows.size(),
            [&](std::size_t i) {
                const CovariateRow& r = rows[i];
                psets[i] = prediction_set(r.pt, fm, q, cells);
                const Vec* mode = a.restriction == Restriction::moe ? nullptr : a.mode_of(r.subject);
                known[i] = mode ? 1 : 0;
                yhat[i] = mode ? point_predict_given_mode(r.pt, a.params, *mode)
                               : point_predict(r.pt, a.params);
            },
            default_threads());
        std::ostringstream s, pt;
        s << "row_id,lo,hi,achieved_mass\n";
        pt << "row_id,subject,point,known_subject\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const std::string id = std::to_string(rows[i].row_id);
            for (const Interval& iv : psets[i].intervals)
                emit(s, {id, format_double(iv.lo), format_double(iv.hi),
                         format_double(psets[i].achieved_mass)});
            emit(pt, {id, rows[i].subject, format_double(yhat[i]), std::to_string(known[i])});
        }
        outputs.commit(sets, s.str());
        outputs.commit(points.empty() ? points_path_for(sets) : points, pt.str());
        out << "predict: " << rows.size() << " rows\n";
    });
}

int cmd_simulate(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Replicated simulation study", "memoe simulate"};
    std::string design, config, report, records, methods = "memoe,remoe,moe,lmm";
    std::vector<double> taus{1.0};
    int reps = 50, k = 0, cells = 2000;
    double q = 0.05;
    std::uint64_t seed = 1;
    app.add_option("--design", design, "example1, example2, example3_case1..3")->required();
    app.add_option("--tau", taus, "random-effect variances")->delimiter(',');
    app.add_option("--reps", reps, "replications per tau");
    app.add_option("--seed", seed, "study seed");
    app.add_option("--methods", methods, "comma separated: memoe, remoe, moe, lmm");
    app.add_option("--config", config, "key=value FitConfig file");
    app.add_option("--k", k, "experts to fit (0: the design's own)");
    app.add_option("--q", q, "miscoverage level");
    app.add_option("--grid-cells", cells, "grid cells per prediction set");
    app.add_option("--out", report, "summary CSV")->required();
    app.add_option("--records", records, "per-replication CSV");
    return guarded(app, args, out, err, [&](Outputs& outputs) {
        const DesignId id = parse_design(design);
        LayeredConfig lc;
        if (!config.empty()) lc.load_file(config);
        lc.cfg.validate();
        StudyOptions opts;
        opts.n_reps = reps;
        opts.cfg = lc.cfg;
        opts.cfg.threads = 1;
        opts.threads = lc.cfg.threads;
        opts.fit_K = k;
        opts.q = q;
        opts.cells = cells;
        opts.seed = seed;
        opts.methods.clear();
        for (const auto& m : split_list(methods)) opts.methods.push_back(parse_method(m));
        if (opts.methods.empty()) throw std::invalid_argument("no methods given");
        if (id == DesignId::example1) taus = {0.0};
        const SimReport rep = run_study(id, taus, opts);

        std::ostringstream s;
        s << "design,tau,method,reps,failed,metric,expert,value\n";
        for (const MethodSummary& m : rep.summary) {
            auto row = [&](const std::string& metric, const std::string& expert, double v) {
                emit(s, {to_string(id), format_double(m.tau), to_string(m.method),
                         std::to_string(m.reps), std::to_string(m.failed), metric, expert,
                         format_double(v)});
            };
            for (std::size_t e = 0; e < m.bias.size(); ++e) {
                row("bias", std::to_string(e), m.bias[e]);
                row("mse", std::to_string(e), m.mse[e]);
            }
            row("gate_prob_mae", "", m.gate_prob_mae);
            row("pmse", "", m.pmse);
            row("coverage", "", m.coverage);
            row("mean_length", "", m.mean_length);
        }
        outputs.commit(report, s.str());
        if (!records.empty()) {
            std::ostringstream r;
            r << "design,tau,method,rep,failed,pmse,coverage,mean_length,gate_prob_mae,loglik,"
                 "em_iters,converged,max_rel_dip,error\n";
            for (const RepRecord& x : rep.records)
                emit(r, {to_string(id), format_double(x.tau), to_string(x.method),
                         std::to_string(x.rep), x.failed ? "1" : "0", format_double(x.pmse),
                         format_double(x.coverage), format_double(x.mean_length),
                         format_double(x.gate_prob_mae), format_double(x.loglik),
                         std::to_string(x.em_iters), x.converged ? "1" : "0",
                         format_double(x.invariants.max_rel_dip), one_line(x.error)});
            outputs.commit(records, r.str());
        }
        out << "simulate: " << rep.records.size() << " fits\n";
    });
}

int cmd_evaluate(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Score predictions against observed responses", "memoe evaluate"};
    std::string predictions, points, truth, data, schema, report;
    app.add_option("--predictions", predictions, "prediction set CSV")->required();
    app.add_option("--points", points, "point prediction CSV");
    app.add_option("--truth", truth, "CSV with columns row_id,y");
    app.add_option("--data", data, "long-format CSV holding the responses");
    app.add_option("--schema", schema, "schema file for --data");
    app.add_option("--out", report, "metrics CSV")->required();
    return guarded(app, args, out, err, [&](Outputs& outputs) {
        std::map<std::size_t, double> y;
        if (!truth.empty()) {
            const CsvTable t = read_csv_file(truth);
            const std::size_t ci = t.column("row_id"), cy = t.column("y");
            for (std::size_t r = 0; r < t.rows.size(); ++r) {
                double id = 0.0, v = 0.0;
                if (!parse_number(trim(t.rows[r][ci]), id) || id < 1)
                    throw CsvError("bad row_id", r + 1, "row_id");
                if (!parse_number(trim(t.rows[r][cy]), v)) throw CsvError("bad value", r + 1, "y");
                y[static_cast<std::size_t>(id)] = v;
            }
        } else if (!data.empty() && !schema.empty()) {
            for (const auto& r : bind_rows(read_csv_file(data), load_schema(schema), true))
                y[r.row_id] = *r.y;
        } else {
            throw std::invalid_argument("either --truth or --data with --schema is required");
        }

        const CsvTable ps = read_csv_file(predictions);
        const std::size_t ci = ps.column("row_id"), clo = ps.column("lo"), chi = ps.column("hi");
        std::map<std::size_t, std::vector<Interval>> sets;
        for (std::size_t r = 0; r < ps.rows.size(); ++r) {
            double id = 0.0, lo = 0.0, hi = 0.0;
            if (!parse_number(trim(ps.rows[r][ci]), id) || !parse_number(trim(ps.rows[r][clo]), lo) ||
                !parse_number(trim(ps.rows[r][chi]), hi))
                throw CsvError("malformed prediction row", r + 1, "");
            sets[static_cast<std::size_t>(id)].push_back({lo, hi});
        }
        double hits = 0.0, length = 0.0;
        for (const auto& [id, v] : y) {
            const auto it = sets.find(id);
            if (it == sets.end())
                throw std::runtime_error("no prediction set for row " + std::to_string(id));
            bool in = false;
            for (const Interval& iv : it->second) {
                in = in || iv.contains(v);
                length += iv.length();
            }
            hits += in ? 1.0 : 0.0;
        }
        const double n = static_cast<double>(y.size());
        if (y.empty()) throw std::runtime_error("no responses to evaluate");
        std::ostringstream s;
        s << "metric,value\n";
        emit(s, {"n", std::to_string(y.size())});
        emit(s, {"coverage", format_double(hits / n)});
        emit(s, {"mean_length", format_double(length / n)});
        if (!points.empty()) {
            const CsvTable pt = read_csv_file(points);
            const std::size_t pi = pt.column("row_id"), pp = pt.column("point");
            std::map<std::size_t, double> yhat;
            for (std::size_t r = 0; r < pt.rows.size(); ++r) {
                double id = 0.0, v = 0.0;
                if (!parse_number(trim(pt.rows[r][pi]), id) || !parse_number(trim(pt.rows[r][pp]), v))
                    throw CsvError("malformed point prediction row", r + 1, "");
                yhat[static_cast<std::size_t>(id)] = v;
            }
            double sse = 0.0;
            for (const auto& [id, v] : y) {
                const auto it = yhat.find(id);
                if (it == yhat.end())
                    throw std::runtime_error("no point prediction for row " + std::to_string(id));
                sse += (v - it->second) * (v - it->second);
            }
            emit(s, {"pmse", format_double(sse / n)});
        }
        outputs.commit(report, s.str());
        out << "evaluate: " << y.size() << " rows\n";
    });
}

int run_cli(int argc, char** argv) {
    const std::string usage =
        "usage: memoe <fit|predict|simulate|evaluate> [options]  (--help for details)\n";
    if (argc < 2) {
        std::cerr << "error: usage: missing command\n" << usage;
        return 2;
    }
    const std::string cmd = argv[1];
    const std::vector<std::string> args(argv + 2, argv + argc);
    if (cmd == "fit") return cmd_fit(args, std::cout, std::cerr);
    if (cmd == "predict") return cmd_predict(args, std::cout, std::cerr);
    if (cmd == "simulate") return cmd_simulate(args, std::cout, std::cerr);
    if (cmd == "evaluate") return cmd_evaluate(args, std::cout, std::cerr);
    if (cmd == "--help" || cmd == "-h") {
        std::cout << usage;
        return 0;
    }
    std::cerr << "error: usage: unknown command '" << cmd << "'\n";
    return 2;
}

}  // namespace memoe
