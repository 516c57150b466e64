#pragma once

// Long-format CSV ingestion, the text model archive, key=value configuration
// and the fit / predict / simulate / evaluate commands.

#include "memoe/em_fit.hpp"
#include "memoe/predict.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace memoe {

struct LongCsvSchema {
    std::string subject_col;
    std::string y_col;
    std::vector<std::string> x_cols;
    std::vector<std::string> z_cols;
    std::vector<std::string> w_cols;
    bool add_intercept_x = false;
    bool add_intercept_z = false;
    bool add_intercept_w = false;
    GatingFeatures gating = GatingFeatures::x;

    /// x and z may share columns; every other overlap throws std::invalid_argument.
    void validate() const;
};

/// Parses "key = value" lines; '#' starts a comment. Lists are comma separated.
LongCsvSchema parse_schema(std::istream& in);
LongCsvSchema load_schema(const std::string& path);

/// row and column are 1-based; row counts data rows after the header, 0 for the header.
struct CsvError : std::runtime_error {
    CsvError(const std::string& what, std::size_t row, std::string column);
    std::size_t row = 0;
    std::string column;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Index of a header name; throws CsvError when absent.
    std::size_t column(const std::string& name) const;
};

/// RFC-4180 reader: quoted fields, doubled quotes, CRLF or LF line ends.
CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

/// One CSV row bound to the schema, in file order.
struct CovariateRow {
    std::size_t row_id = 0;  // 1-based data row
    std::string subject;
    NewPoint pt;
    std::optional<double> y;
};

std::vector<CovariateRow> bind_rows(const CsvTable& table, const LongCsvSchema& schema,
                                    bool require_y);

/// Groups rows by subject in order of first appearance, checks that w is
/// constant within each subject and rejects missing or non-numeric cells.
Dataset load_long_csv(const std::string& path, const LongCsvSchema& schema);
Dataset dataset_from_table(const CsvTable& table, const LongCsvSchema& schema);

inline constexpr int kArchiveVersion = 1;

struct ArchiveError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Everything prediction needs, plus the fit's diagnostics and subject modes.
struct ModelArchive {
    int version = kArchiveVersion;
    ModelParams params;
    DatasetSums sums;
    Restriction restriction = Restriction::none;
    bool converged = false;
    int em_iters = 0;
    int best_of = 0;
    std::vector<double> loglik_trace;
    FitDiagnostics diag;
    std::vector<std::string> subject_ids;
    std::vector<Vec> subject_modes;

    static ModelArchive from_fit(const FittedModel& fitted);
    /// Posteriors carry the stored modes only.
    FittedModel to_fitted() const;
    /// Mode of a training subject, if the id is known.
    const Vec* mode_of(const std::string& subject_id) const;
};

void write_model(const ModelArchive& archive, std::ostream& out);
ModelArchive read_model(std::istream& in);
void save_model(const ModelArchive& archive, const std::string& path);
ModelArchive load_model(const std::string& path);

/// Config keys match the FitConfig field names; "K" is also accepted as "k".
std::map<std::string, std::string> parse_key_values(std::istream& in);
void apply_config(FitConfig& cfg, const std::string& key, const std::string& value);

/// Number formatting shared by every emitted file.
std::string format_double(double v);
/// RFC-4180 quoting when the field needs it.
std::string csv_field(const std::string& s);

/// Commands take the arguments after the subcommand name. They return 0 on
/// success; on failure they print one "error: ..." line to err, remove any
/// partial outputs and return nonzero.
int cmd_fit(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_predict(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_simulate(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_evaluate(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Dispatches argv[1] to a command.
int run_cli(int argc, char** argv);

}  // namespace memoe
