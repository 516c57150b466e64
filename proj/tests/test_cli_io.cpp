#include "doctest.h"

#include "memoe/cli_io.hpp"
#include "memoe/sim_bench.hpp"
#include "oracles.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace memoe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("memoe_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

LongCsvSchema schema_from(const std::string& text) {
    std::istringstream in(text);
    return parse_schema(in);
}

Dataset dataset_from(const std::string& csv, const LongCsvSchema& schema) {
    std::istringstream in(csv);
    return dataset_from_table(read_csv(in), schema);
}

const char* const kFixtureSchema =
    "subject = id\n"
    "y = resp\n"
    "x = a, b\n"
    "z = b\n"
    "w = grp\n"
    "intercept_x = true\n"
    "intercept_z = true\n"
    "intercept_w = true\n";

struct Run {
    int status = 0;
    std::string out, err;
};

template <class Cmd>
Run run(Cmd cmd, const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Run r;
    r.status = cmd(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

/// Rows of a "section,name,index,value" fit report keyed by section/name/index.
std::map<std::string, std::string> report_rows(const std::string& path) {
    const CsvTable t = read_csv_file(path);
    std::map<std::string, std::string> out;
    for (const auto& r : t.rows) out[r[0] + "/" + r[1] + "/" + r[2]] = r[3];
    return out;
}

std::string example2_csv_row(const std::string& id, double y, const Vec& x) {
    std::string s = id + "," + format_double(y);
    for (Eigen::Index c = 0; c < x.size(); ++c) s += "," + format_double(x[c]);
    return s + "\n";
}

const char* const kExample2Schema =
    "subject = id\n"
    "y = y\n"
    "x = x1, x2, x3, x4, x5\n"
    "intercept_z = true\n"
    "intercept_w = true\n";

}  // namespace

TEST_CASE("two subjects with two rows each load with exact values") {
    const LongCsvSchema schema = schema_from(kFixtureSchema);
    const Dataset ds = dataset_from(
        "id,resp,a,b,grp\n"
        "s1,1.5,2,3,7\n"
        "s2,-4,0.25,-1,8\n"
        "s1,2.5,4,5,7\n"
        "s2,0,1e-3,6,8\n",
        schema);
    REQUIRE(ds.n_subjects() == 2);
    const Subject& s1 = ds.subject(0);
    const Subject& s2 = ds.subject(1);
    CHECK(s1.id == "s1");
    CHECK(s2.id == "s2");
    REQUIRE(s1.obs.size() == 2);
    REQUIRE(s2.obs.size() == 2);
    CHECK(s1.obs[0].y == 1.5);
    CHECK(s1.obs[1].y == 2.5);
    CHECK(s2.obs[0].y == -4.0);
    CHECK(s2.obs[1].y == 0.0);
    CHECK(s1.obs[0].x == (Vec(3) << 1, 2, 3).finished());
    CHECK(s1.obs[1].x == (Vec(3) << 1, 4, 5).finished());
    CHECK(s2.obs[0].x == (Vec(3) << 1, 0.25, -1).finished());
    CHECK(s2.obs[1].x == (Vec(3) << 1, 1e-3, 6).finished());
    CHECK(s1.obs[1].z == (Vec(2) << 1, 5).finished());
    CHECK(s2.obs[0].z == (Vec(2) << 1, -1).finished());
    CHECK(s1.w == (Vec(2) << 1, 7).finished());
    CHECK(s2.w == (Vec(2) << 1, 8).finished());
}

TEST_CASE("header permutation yields an identical dataset") {
    const LongCsvSchema schema = schema_from(kFixtureSchema);
    const Dataset a = dataset_from("id,resp,a,b,grp\ns1,1,2,3,4\ns1,5,6,7,4\ns2,9,10,11,12\n", schema);
    const Dataset b = dataset_from("grp,b,id,a,resp\n4,3,s1,2,1\n4,7,s1,6,5\n12,11,s2,10,9\n", schema);
    REQUIRE(a.n_subjects() == b.n_subjects());
    for (std::size_t i = 0; i < a.n_subjects(); ++i) {
        const Subject& sa = a.subject(i);
        const Subject& sb = b.subject(i);
        CHECK(sa.id == sb.id);
        CHECK(sa.w == sb.w);
        REQUIRE(sa.obs.size() == sb.obs.size());
        for (std::size_t j = 0; j < sa.obs.size(); ++j) {
            CHECK(sa.obs[j].y == sb.obs[j].y);
            CHECK(sa.obs[j].x == sb.obs[j].x);
            CHECK(sa.obs[j].z == sb.obs[j].z);
        }
    }
}

TEST_CASE("ingestion errors carry their location") {
    const LongCsvSchema schema = schema_from(kFixtureSchema);
    auto error_of = [&](const std::string& csv) -> CsvError {
        try {
            dataset_from(csv, schema);
        } catch (const CsvError& e) {
            return e;
        }
        FAIL("no CsvError thrown");
        return CsvError("", 0, "");
    };

    SUBCASE("w varying within a subject names the subject") {
        const CsvError e = error_of("id,resp,a,b,grp\np17,1,2,3,4\np17,1,2,3,5\n");
        CHECK(std::string(e.what()).find("p17") != std::string::npos);
        CHECK(e.row == 2);
        CHECK(e.column == "grp");
    }
    SUBCASE("missing column") {
        const CsvError e = error_of("id,resp,a,grp\ns,1,2,4\n");
        CHECK(e.column == "b");
    }
    SUBCASE("empty cell") {
        const CsvError e = error_of("id,resp,a,b,grp\ns,1,2,3,4\ns,1,,3,4\n");
        CHECK(e.row == 2);
        CHECK(e.column == "a");
    }
    SUBCASE("NA cell") {
        const CsvError e = error_of("id,resp,a,b,grp\ns,NA,2,3,4\n");
        CHECK(e.row == 1);
        CHECK(e.column == "resp");
    }
    SUBCASE("non-numeric cell") {
        const CsvError e = error_of("id,resp,a,b,grp\ns,1,2,3x,4\n");
        CHECK(e.column == "b");
        CHECK(std::string(e.what()).find("3x") != std::string::npos);
    }
    SUBCASE("infinite cell") {
        CHECK(error_of("id,resp,a,b,grp\ns,1,inf,3,4\n").column == "a");
    }
    SUBCASE("empty file") {
        std::istringstream in("");
        CHECK_THROWS_AS(read_csv(in), CsvError);
    }
    SUBCASE("header only") {
        CHECK(error_of("id,resp,a,b,grp\n").row == 0);
    }
    SUBCASE("ragged row") {
        std::istringstream in("a,b\n1,2\n3\n");
        CHECK_THROWS_AS(read_csv(in), CsvError);
    }
    SUBCASE("duplicate header") {
        std::istringstream in("a,a\n1,2\n");
        CHECK_THROWS_AS(read_csv(in), CsvError);
    }
}

TEST_CASE("RFC-4180 quoting and line endings") {
    std::istringstream in("name,\"val,ue\"\r\n\"a \"\"b\"\", c\",\"1\r\n2\"\r\nplain,3\n");
    const CsvTable t = read_csv(in);
    REQUIRE(t.header.size() == 2);
    CHECK(t.header[1] == "val,ue");
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][0] == "a \"b\", c");
    CHECK(t.rows[0][1] == "1\r\n2");
    CHECK(t.rows[1][0] == "plain");
    CHECK(t.rows[1][1] == "3");
    std::istringstream bad("a,b\n\"open,1\n");
    CHECK_THROWS_AS(read_csv(bad), CsvError);

    CHECK(csv_field("plain") == "plain");
    CHECK(csv_field("a,b") == "\"a,b\"");
    CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(csv_field("two\nlines") == "\"two\nlines\"");
}

TEST_CASE("format_double round-trips every double") {
    CounterRng rng(11);
    for (int t = 0; t < 20000; ++t) {
        const std::uint64_t bits = rng.next_u64();
        double v = 0.0;
        std::memcpy(&v, &bits, sizeof v);
        if (!std::isfinite(v)) continue;
        CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
    }
    for (double v : {0.0, -0.0, 1.0, 0.1, 1e-300, 5e-324, 1.7976931348623157e308})
        CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
}

TEST_CASE("schema validation") {
    CHECK_NOTHROW(schema_from(kFixtureSchema));
    CHECK_THROWS_AS(schema_from("y = r\nx = a\nz = a\nw = g\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\nx = a\nz = a\nw = g\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nz = a\nw = g\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = a\nw = g\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = a\nz = a\n"), std::invalid_argument);
    // x and z may share a column, nothing else may
    CHECK_NOTHROW(schema_from("subject = s\ny = r\nx = a\nz = a\nw = g\n"));
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = a\nz = a\nw = a\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = r\nz = a\nw = g\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = a, a\nz = a\nw = g\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = a\nz = a\nw = g\nbogus = 1\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\nsubject = t\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject s\n"), std::invalid_argument);
    CHECK_THROWS_AS(schema_from("subject = s\ny = r\nx = a\nz = a\nw = g\nintercept_x = maybe\n"),
                    std::invalid_argument);
}

TEST_CASE("config keys map onto FitConfig") {
    FitConfig cfg;
    apply_config(cfg, "k", "3");
    apply_config(cfg, "n_starts", "7");
    apply_config(cfg, "em_rel_tol", "1e-9");
    apply_config(cfg, "restriction", "remoe");
    apply_config(cfg, "seed", "42");
    CHECK(cfg.K == 3);
    CHECK(cfg.n_starts == 7);
    CHECK(cfg.em_rel_tol == 1e-9);
    CHECK(cfg.restriction == Restriction::remoe);
    CHECK(cfg.seed == 42);
    CHECK_THROWS_AS(apply_config(cfg, "unknown_key", "1"), std::invalid_argument);
    CHECK_THROWS_AS(apply_config(cfg, "n_starts", "2.5"), std::invalid_argument);
    CHECK_THROWS_AS(apply_config(cfg, "em_rel_tol", "small"), std::invalid_argument);
    CHECK_THROWS_AS(apply_config(cfg, "restriction", "lmm"), std::invalid_argument);
}

namespace {

FittedModel small_fit(CounterRng& rng, int q) {
    oracle::Shape sh;
    sh.K = 2;
    sh.p = 3;
    sh.q = q;
    sh.d = 2;
    sh.beta_sd = 3.0;
    const ModelParams m = oracle::random_params(rng, sh);
    std::vector<Subject> subs;
    const Dataset raw = oracle::draw_dataset(rng, m, 40, 3, 5);
    for (Subject s : raw.subjects()) {
        s.id = "subj " + s.id + ",\"x\"";  // ids with spaces, commas and quotes
        subs.push_back(std::move(s));
    }
    FitConfig cfg;
    cfg.K = 2;
    cfg.n_starts = 2;
    cfg.seed = 3;
    return fit(Dataset(std::move(subs)), cfg);
}

std::string archive_text(const ModelArchive& a) {
    std::ostringstream out;
    write_model(a, out);
    return out.str();
}

ModelArchive archive_from(const std::string& text) {
    std::istringstream in(text);
    return read_model(in);
}

}  // namespace

TEST_CASE("archive save, load, save is byte-identical") {
    CounterRng rng(21);
    const FittedModel f = small_fit(rng, 2);
    TempDir dir("archive");
    const ModelArchive a = ModelArchive::from_fit(f);
    save_model(a, dir / "m1.txt");
    const ModelArchive b = load_model(dir / "m1.txt");
    save_model(b, dir / "m2.txt");
    CHECK(read_file(dir / "m1.txt") == read_file(dir / "m2.txt"));

    CHECK(b.params.alpha == f.params.alpha);
    CHECK(b.params.beta == f.params.beta);
    CHECK(b.params.sigma2 == f.params.sigma2);
    CHECK(b.params.kappa == f.params.kappa);
    CHECK(b.params.Sigma == f.params.Sigma);
    CHECK(b.sums.w_gram == f.sums.w_gram);
    for (int k = 0; k < 2; ++k) CHECK(b.sums.expert_gram[k] == f.sums.expert_gram[k]);
    CHECK(b.loglik_trace == f.loglik_trace);
    CHECK(b.subject_ids == f.subject_ids);
    for (std::size_t i = 0; i < f.posteriors.size(); ++i) CHECK(b.subject_modes[i] == f.posteriors[i].u_hat);
    REQUIRE(b.mode_of(f.subject_ids[5]) != nullptr);
    CHECK(*b.mode_of(f.subject_ids[5]) == f.posteriors[5].u_hat);
    CHECK(b.mode_of("no such subject") == nullptr);
}

TEST_CASE("predictions from a loaded archive equal in-memory predictions bit for bit") {
    CounterRng rng(22);
    const FittedModel f = small_fit(rng, 1);
    const FittedModel g = archive_from(archive_text(ModelArchive::from_fit(f))).to_fitted();
    for (int t = 0; t < 50; ++t) {
        NewPoint pt;
        pt.x = oracle::normal_vec(rng, 3);
        pt.z = oracle::normal_vec(rng, 1);
        pt.w = oracle::normal_vec(rng, 2);
        CHECK(point_predict(pt, f) == point_predict(pt, g));
        const PredictionSet a = prediction_set(pt, f, 0.05);
        const PredictionSet b = prediction_set(pt, g, 0.05);
        CHECK(a.achieved_mass == b.achieved_mass);
        REQUIRE(a.intervals.size() == b.intervals.size());
        for (std::size_t i = 0; i < a.intervals.size(); ++i) {
            CHECK(a.intervals[i].lo == b.intervals[i].lo);
            CHECK(a.intervals[i].hi == b.intervals[i].hi);
        }
    }
}

TEST_CASE("archive loading rejects corrupt content") {
    CounterRng rng(23);
    const std::string text = archive_text(ModelArchive::from_fit(small_fit(rng, 2)));
    auto replace_line_after = [&](const std::string& marker, const std::string& line) {
        const auto at = text.find(marker);
        REQUIRE(at != std::string::npos);
        const auto start = text.find('\n', at) + 1;
        const auto end = text.find('\n', start);
        return text.substr(0, start) + line + text.substr(end);
    };

    SUBCASE("non-symmetric Sigma") {
        const auto at = text.find("matrix Sigma 2 2\n");
        const auto start = text.find('\n', at) + 1;
        const auto end = text.find('\n', start);
        std::istringstream row(text.substr(start, end - start));
        double s00 = 0.0, s01 = 0.0;
        row >> s00 >> s01;
        const std::string edited =
            replace_line_after("matrix Sigma 2 2\n", format_double(s00) + " " + format_double(s01 + 0.125));
        CHECK_THROWS_AS(archive_from(edited), ArchiveError);
    }
    SUBCASE("Sigma not positive definite") {
        std::string edited = replace_line_after("matrix Sigma 2 2\n", "1 2");
        const auto at = edited.find("matrix Sigma 2 2\n");
        const auto second = edited.find('\n', edited.find('\n', at) + 1) + 1;
        edited = edited.substr(0, second) + "2 1" + edited.substr(edited.find('\n', second));
        CHECK_THROWS_AS(archive_from(edited), ArchiveError);
    }
    SUBCASE("version mismatch") {
        std::string edited = text;
        edited.replace(0, edited.find('\n'), "memoe-archive 99");
        CHECK_THROWS_AS(archive_from(edited), ArchiveError);
    }
    SUBCASE("corrupt matrix block") {
        CHECK_THROWS_AS(archive_from(replace_line_after("matrix beta 2 3\n", "1 2")), ArchiveError);
        CHECK_THROWS_AS(archive_from(replace_line_after("matrix beta 2 3\n", "1 2 zz")), ArchiveError);
    }
    SUBCASE("negative variance") {
        CHECK_THROWS_AS(archive_from(replace_line_after("vector sigma2 2\n", "1 -1")), ArchiveError);
    }
    SUBCASE("truncated") {
        CHECK_THROWS_AS(archive_from(text.substr(0, text.size() / 2)), ArchiveError);
        CHECK_THROWS_AS(archive_from(""), ArchiveError);
    }
    SUBCASE("not an archive") {
        CHECK_THROWS_AS(archive_from("id,resp\n1,2\n"), ArchiveError);
    }
}

TEST_CASE("fit and predict on held-out Example 2 rows beat the MoE baseline") {
    TempDir dir("e2");
    const SimData sim = gen_example2(5.0, 31);
    const Split split = split_observations(sim.data, 0.2, 32);

    std::string train = "id,y,x1,x2,x3,x4,x5\n";
    for (const Subject& s : split.train.subjects())
        for (const Observation& o : s.obs) train += example2_csv_row(s.id, o.y, o.x);
    // held-out rows keep the id of their subject; the response column holds the truth
    std::string test = "id,y,x1,x2,x3,x4,x5\n";
    for (const HeldOut& h : split.test) {
        REQUIRE(h.train_subject >= 0);
        test += example2_csv_row(split.train.subject(h.train_subject).id, h.point.y, h.point.pt.x);
    }
    write_file(dir / "train.csv", train);
    write_file(dir / "test.csv", test);
    write_file(dir / "schema.txt", kExample2Schema);

    std::map<std::string, double> pmse;
    for (const std::string restriction : {"memoe", "moe"}) {
        const std::string model = dir / (restriction + ".model");
        const std::string sets = dir / (restriction + "_sets.csv");
        const Run f = run(cmd_fit, {"--data", dir / "train.csv", "--schema", dir / "schema.txt", "--k", "3",
                                    "--restriction", restriction, "--model", model, "--out",
                                    dir / (restriction + "_report.csv"), "--no-sandwich"});
        REQUIRE_MESSAGE(f.status == 0, f.err);
        const Run p = run(cmd_predict, {"--model", model, "--data", dir / "test.csv", "--schema",
                                        dir / "schema.txt", "--q", "0.05", "--out", sets});
        REQUIRE_MESSAGE(p.status == 0, p.err);

        const CsvTable st = read_csv_file(sets);
        CHECK(st.header == std::vector<std::string>{"row_id", "lo", "hi", "achieved_mass"});
        for (const auto& r : st.rows) {
            CHECK(std::stod(r[3]) >= 0.95);
            CHECK(std::stod(r[1]) < std::stod(r[2]));
        }
        const CsvTable pt = read_csv_file(dir / (restriction + "_sets_points.csv"));
        CHECK(pt.rows.size() == split.test.size());
        for (const auto& r : pt.rows) CHECK(r[3] == (restriction == "moe" ? "0" : "1"));

        const std::string metrics = dir / (restriction + "_metrics.csv");
        const Run e = run(cmd_evaluate, {"--predictions", sets, "--points", dir / (restriction + "_sets_points.csv"),
                                         "--data", dir / "test.csv", "--schema", dir / "schema.txt", "--out",
                                         metrics});
        REQUIRE_MESSAGE(e.status == 0, e.err);
        std::map<std::string, double> m;
        for (const auto& r : read_csv_file(metrics).rows) m[r[0]] = std::stod(r[1]);
        CHECK(m["n"] == static_cast<double>(split.test.size()));
        CHECK(m["coverage"] > 0.85);
        pmse[restriction] = m["pmse"];

        // independent PMSE from the emitted point predictions
        double sse = 0.0;
        for (std::size_t i = 0; i < split.test.size(); ++i) {
            const double d = split.test[i].point.y - std::stod(pt.rows[i][2]);
            sse += d * d;
        }
        CHECK(m["pmse"] == doctest::Approx(sse / split.test.size()).epsilon(1e-12));
    }
    MESSAGE("memoe pmse " << pmse["memoe"] << ", moe pmse " << pmse["moe"]);
    CHECK(pmse["memoe"] < pmse["moe"]);
}

TEST_CASE("fit report logs config precedence and fit is idempotent") {
    TempDir dir("cfg");
    const SimData sim = gen_example2(1.0, 41);
    std::string csv = "id,y,x1,x2,x3,x4,x5\n";
    for (const Subject& s : sim.data.subjects())
        for (const Observation& o : s.obs) csv += example2_csv_row(s.id, o.y, o.x);
    write_file(dir / "data.csv", csv);
    write_file(dir / "schema.txt", kExample2Schema);
    write_file(dir / "fit.cfg", "# layered over the defaults\nK = 2\nn_starts = 2\nseed = 9\n");

    auto fit_args = [&](const std::string& tag) {
        return std::vector<std::string>{"--data", dir / "data.csv", "--schema", dir / "schema.txt",
                                        "--config", dir / "fit.cfg", "--k", "3", "--model",
                                        dir / (tag + ".model"), "--out", dir / (tag + ".csv")};
    };
    const Run a = run(cmd_fit, fit_args("a"));
    REQUIRE_MESSAGE(a.status == 0, a.err);
    const Run b = run(cmd_fit, fit_args("b"));
    REQUIRE_MESSAGE(b.status == 0, b.err);
    CHECK(read_file(dir / "a.model") == read_file(dir / "b.model"));
    CHECK(read_file(dir / "a.csv") == read_file(dir / "b.csv"));

    const auto rep = report_rows(dir / "a.csv");
    CHECK(rep.at("config/K/flag") == "3");
    CHECK(rep.at("config/n_starts/file") == "2");
    CHECK(rep.at("config/seed/file") == "9");
    CHECK(rep.at("config/em_rel_tol/default") == format_double(FitConfig{}.em_rel_tol));
    CHECK(rep.count("summary/loglik/") == 1);
    CHECK(rep.count("trace/loglik/0") == 1);
    CHECK(rep.count("sandwich/se.0/0") == 1);
    CHECK(rep.count("param/beta.2/4") == 1);
    CHECK(load_model(dir / "a.model").params.K() == 3);
}

TEST_CASE("simulate is deterministic for a fixed seed") {
    TempDir dir("sim");
    auto args = [&](const std::string& tag) {
        return std::vector<std::string>{"--design", "example1", "--reps", "5", "--seed", "7", "--methods", "moe",
                                        "--out", dir / (tag + ".csv"), "--records", dir / (tag + "_rec.csv")};
    };
    const Run a = run(cmd_simulate, args("a"));
    REQUIRE_MESSAGE(a.status == 0, a.err);
    const Run b = run(cmd_simulate, args("b"));
    REQUIRE_MESSAGE(b.status == 0, b.err);
    CHECK(read_file(dir / "a.csv") == read_file(dir / "b.csv"));
    CHECK(read_file(dir / "a_rec.csv") == read_file(dir / "b_rec.csv"));
    const CsvTable t = read_csv_file(dir / "a.csv");
    CHECK(t.header == std::vector<std::string>{"design", "tau", "method", "reps", "failed", "metric", "expert",
                                               "value"});
    CHECK(read_csv_file(dir / "a_rec.csv").rows.size() == 5);
}

TEST_CASE("failures print one error line and leave no partial outputs") {
    TempDir dir("err");
    const SimData sim = gen_example2(1.0, 51);
    std::string csv = "id,y,x1,x2,x3,x4,x5\n";
    for (const Subject& s : sim.data.subjects())
        for (const Observation& o : s.obs) csv += example2_csv_row(s.id, o.y, o.x);
    write_file(dir / "data.csv", csv);
    write_file(dir / "schema.txt", kExample2Schema);

    auto one_error_line = [](const Run& r) {
        CHECK(r.status != 0);
        CHECK(r.err.rfind("error: ", 0) == 0);
        CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    };

    SUBCASE("report directory missing after the model is written") {
        const Run r = run(cmd_fit, {"--data", dir / "data.csv", "--schema", dir / "schema.txt", "--k", "2",
                                    "--no-sandwich", "--model", dir / "m.model", "--out",
                                    dir / "missing_dir/report.csv"});
        one_error_line(r);
        CHECK_FALSE(fs::exists(dir / "m.model"));
        for (const auto& entry : fs::directory_iterator(dir.path))
            CHECK(entry.path().filename().string().find(".tmp.") == std::string::npos);
    }
    SUBCASE("missing data file") {
        one_error_line(run(cmd_fit, {"--data", dir / "nope.csv", "--schema", dir / "schema.txt", "--model",
                                     dir / "m.model", "--out", dir / "r.csv"}));
        CHECK_FALSE(fs::exists(dir / "m.model"));
        CHECK_FALSE(fs::exists(dir / "r.csv"));
    }
    SUBCASE("bad data cell names its row") {
        write_file(dir / "bad.csv", "id,y,x1,x2,x3,x4,x5\na,1,2,3,4,5,6\na,1,2,NA,4,5,6\n");
        const Run r = run(cmd_fit, {"--data", dir / "bad.csv", "--schema", dir / "schema.txt", "--model",
                                    dir / "m.model", "--out", dir / "r.csv"});
        one_error_line(r);
        CHECK(r.err.find("row 2") != std::string::npos);
        CHECK(r.err.find("x2") != std::string::npos);
    }
    SUBCASE("missing required flag") {
        one_error_line(run(cmd_fit, {"--data", dir / "data.csv"}));
    }
    SUBCASE("invalid config value") {
        write_file(dir / "bad.cfg", "n_starts = 0\n");
        one_error_line(run(cmd_fit, {"--data", dir / "data.csv", "--schema", dir / "schema.txt", "--config",
                                     dir / "bad.cfg", "--model", dir / "m.model", "--out", dir / "r.csv"}));
    }
    SUBCASE("predict with mismatched covariates") {
        write_file(dir / "narrow.txt", "subject = id\ny = y\nx = x1, x2\nintercept_z = true\nintercept_w = true\n");
        const Run f = run(cmd_fit, {"--data", dir / "data.csv", "--schema", dir / "schema.txt", "--k", "2",
                                    "--no-sandwich", "--model", dir / "m.model", "--out", dir / "r.csv"});
        REQUIRE(f.status == 0);
        one_error_line(run(cmd_predict, {"--model", dir / "m.model", "--data", dir / "data.csv", "--schema",
                                         dir / "narrow.txt", "--out", dir / "sets.csv"}));
        CHECK_FALSE(fs::exists(dir / "sets.csv"));
        CHECK_FALSE(fs::exists(dir / "sets_points.csv"));
    }
    SUBCASE("unknown design") {
        one_error_line(run(cmd_simulate, {"--design", "example9", "--out", dir / "s.csv"}));
        CHECK_FALSE(fs::exists(dir / "s.csv"));
    }
    SUBCASE("evaluate without responses") {
        write_file(dir / "sets.csv", "row_id,lo,hi,achieved_mass\n1,0,1,0.95\n");
        one_error_line(run(cmd_evaluate, {"--predictions", dir / "sets.csv", "--out", dir / "m.csv"}));
        CHECK_FALSE(fs::exists(dir / "m.csv"));
    }
}

TEST_CASE("the memoe binary reports errors on one line with a nonzero status") {
    const char* cli = std::getenv("MEMOE_CLI");
    if (cli == nullptr) {
        MESSAGE("MEMOE_CLI not set; binary checks skipped");
        return;
    }
    TempDir dir("bin");
    const std::string err = dir / "stderr.txt";
    auto status_of = [&](const std::string& args) {
        const int raw = std::system(("\"" + std::string(cli) + "\" " + args + " 2>\"" + err + "\" >/dev/null").c_str());
        return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    };
    CHECK(status_of("frobnicate") != 0);
    CHECK(read_file(err).rfind("error: ", 0) == 0);
    CHECK(status_of("fit --data /nonexistent.csv --schema /nonexistent.txt --model " + (dir / "m") + " --out " +
                    (dir / "r")) != 0);
    const std::string e = read_file(err);
    CHECK(e.rfind("error: ", 0) == 0);
    CHECK(std::count(e.begin(), e.end(), '\n') == 1);
    CHECK(status_of("--help") == 0);
}
