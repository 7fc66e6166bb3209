#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "causalfp/ingest.hpp"
#include "causalfp/rng.hpp"

namespace fs = std::filesystem;
using namespace causalfp;

namespace {

fs::path make_temp_dir(const std::string& tag) {
    fs::path dir = fs::path(testing::TempDir()) / ("causalfp_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

ManifestEntry entry(const std::string& subject = "S1", const std::string& task = "rest",
                    const std::string& session = "A", double dt = 0.72) {
    return {"", subject, task, session, dt};
}

}  // namespace

TEST(LoadRecording, ZeroCsv) {
    const auto dir = make_temp_dir("load_zero");
    write_text(dir / "z.csv", "a,b,c\n0,0,0\n0,0,0\n0,0,0\n0,0,0\n");
    const Recording rec = load_recording(dir / "z.csv", entry());
    EXPECT_EQ(rec.channels(), 3);
    EXPECT_EQ(rec.samples(), 4);
    EXPECT_TRUE(rec.data.isZero(0.0));
    EXPECT_DOUBLE_EQ(rec.dt, 0.72);
}

TEST(LoadRecording, RaggedRowNamesIndex) {
    const auto dir = make_temp_dir("load_ragged");
    write_text(dir / "bad.csv", "a,b,c\n1,2,3\n4,5\n6,7,8\n");
    try {
        load_recording(dir / "bad.csv", entry());
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& ex) {
        EXPECT_NE(std::string(ex.what()).find("row 2"), std::string::npos) << ex.what();
    }
}

TEST(LoadRecording, NonNumericCellNamesRowAndColumn) {
    const auto dir = make_temp_dir("load_nonnum");
    write_text(dir / "bad.csv", "a,b\n1,2\n3,oops\n");
    try {
        load_recording(dir / "bad.csv", entry());
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& ex) {
        const std::string msg = ex.what();
        EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("column 2"), std::string::npos) << msg;
    }
}

TEST(LoadRecording, TooFewSamplesRejected) {
    const auto dir = make_temp_dir("load_short");
    write_text(dir / "short.csv", "a,b\n1,2\n");
    EXPECT_THROW(load_recording(dir / "short.csv", entry()), ValidationError);
}

TEST(LoadRecording, NonFiniteRejected) {
    const auto dir = make_temp_dir("load_inf");
    write_text(dir / "inf.csv", "a,b\n1,2\n3,inf\n");
    EXPECT_THROW(load_recording(dir / "inf.csv", entry()), ValidationError);
}

// Write-then-read oracle: serialized values reproduce the matrix bitwise.
TEST(LoadRecording, WriteReadRoundTripIsExact) {
    const auto dir = make_temp_dir("roundtrip");
    Rng rng(99);
    Recording rec;
    rec.subject_id = "S1";
    rec.task_id = "rest";
    rec.session_tag = "A";
    rec.dt = 0.72;
    rec.data.resize(5, 37);
    for (Eigen::Index i = 0; i < rec.data.rows(); ++i)
        for (Eigen::Index j = 0; j < rec.data.cols(); ++j)
            rec.data(i, j) = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
    write_recording(dir / "r.csv", rec);
    const Recording back = load_recording(dir / "r.csv", entry());
    ASSERT_EQ(back.data.rows(), rec.data.rows());
    ASSERT_EQ(back.data.cols(), rec.data.cols());
    for (Eigen::Index i = 0; i < rec.data.rows(); ++i)
        for (Eigen::Index j = 0; j < rec.data.cols(); ++j)
            EXPECT_EQ(back.data(i, j), rec.data(i, j)) << "mismatch at " << i << "," << j;
}

TEST(Normalize, ConstantChannelIsCenteredAndFlagged) {
    Recording rec;
    rec.data.resize(2, 4);
    rec.data.row(0) << 5, 5, 5, 5;
    rec.data.row(1) << 1, 2, 3, 4;
    std::vector<Eigen::Index> flagged;
    const Recording out = normalize(rec, Normalization::zscore_per_channel, &flagged);
    EXPECT_TRUE(out.data.row(0).isZero(0.0));
    ASSERT_EQ(flagged.size(), 1u);
    EXPECT_EQ(flagged[0], 0);
}

TEST(Normalize, NoneIsIdentity) {
    Recording rec;
    rec.data.resize(2, 3);
    rec.data << 1, 2, 3, 4, 5, 6;
    const Recording out = normalize(rec, Normalization::none);
    EXPECT_EQ(out.data, rec.data);
}

// Hand-computed: mean 2, sample std 1.
TEST(Normalize, HandComputedZScore) {
    Recording rec;
    rec.data.resize(2, 3);
    rec.data.row(0) << 1, 2, 3;
    rec.data.row(1) << 10, 10, 16;
    const Recording out = normalize(rec, Normalization::zscore_per_channel);
    EXPECT_NEAR(out.data(0, 0), -1.0, 1e-15);
    EXPECT_NEAR(out.data(0, 1), 0.0, 1e-15);
    EXPECT_NEAR(out.data(0, 2), 1.0, 1e-15);
}

TEST(Normalize, ZScoredChannelsHaveZeroMeanUnitStd) {
    Rng rng(4);
    Recording rec;
    rec.data.resize(6, 201);
    for (Eigen::Index i = 0; i < rec.data.rows(); ++i)
        for (Eigen::Index j = 0; j < rec.data.cols(); ++j) rec.data(i, j) = 3.0 + 7.0 * rng.normal();
    const Recording out = normalize(rec, Normalization::zscore_per_channel);
    for (Eigen::Index i = 0; i < out.data.rows(); ++i) {
        EXPECT_NEAR(out.data.row(i).mean(), 0.0, 1e-12);
        const double sd = std::sqrt(out.data.row(i).squaredNorm() / static_cast<double>(out.data.cols() - 1));
        EXPECT_NEAR(sd, 1.0, 1e-12);
    }
}

TEST(Partition, SelectsRowsInSpecOrder) {
    Recording rec;
    rec.data.resize(3, 2);
    rec.data << 1, 2, 3, 4, 5, 6;
    PartitionSpec spec;
    spec.state_indices = {0, 2};
    spec.input_indices = {1};
    const auto [X, U] = partition(rec, spec);
    EXPECT_EQ(X.row(0), rec.data.row(0));
    EXPECT_EQ(X.row(1), rec.data.row(2));
    EXPECT_EQ(U.row(0), rec.data.row(1));
}

TEST(Partition, FullScaleDimensions) {
    Recording rec;
    rec.data = Eigen::MatrixXd::Zero(100, 10);
    const PartitionSpec spec = PartitionSpec::last_n_inputs(100, 10);
    const auto [X, U] = partition(rec, spec);
    EXPECT_EQ(X.rows(), 90);
    EXPECT_EQ(U.rows(), 10);
    EXPECT_EQ(X.cols(), 10);
}

TEST(Partition, DuplicateIndexRejected) {
    Recording rec;
    rec.data = Eigen::MatrixXd::Zero(3, 4);
    PartitionSpec spec;
    spec.state_indices = {0, 1};
    spec.input_indices = {1};
    EXPECT_THROW(partition(rec, spec), ValidationError);
}

TEST(Partition, OutOfRangeIndexRejected) {
    Recording rec;
    rec.data = Eigen::MatrixXd::Zero(3, 4);
    PartitionSpec spec;
    spec.state_indices = {0, 3};
    spec.input_indices = {1};
    EXPECT_THROW(partition(rec, spec), ValidationError);
}

// Re-interleaving the partitioned blocks restores the matrix exactly.
TEST(Partition, ReinterleaveReconstructs) {
    Rng rng(11);
    Recording rec;
    rec.data.resize(7, 13);
    for (Eigen::Index i = 0; i < rec.data.rows(); ++i)
        for (Eigen::Index j = 0; j < rec.data.cols(); ++j) rec.data(i, j) = rng.normal();
    PartitionSpec spec;
    spec.state_indices = {4, 0, 6, 2, 5};
    spec.input_indices = {3, 1};
    const auto [X, U] = partition(rec, spec);
    Eigen::MatrixXd rebuilt(7, 13);
    for (Eigen::Index i = 0; i < spec.m(); ++i) rebuilt.row(spec.state_indices[i]) = X.row(i);
    for (Eigen::Index i = 0; i < spec.n(); ++i) rebuilt.row(spec.input_indices[i]) = U.row(i);
    EXPECT_EQ(rebuilt, rec.data);
}

TEST(Manifest, JsonRoundTrip) {
    CorpusManifest manifest;
    manifest.entries = {{"a.csv", "S1", "rest", "A", 0.72}, {"b.csv", "S2", "rest", "A", 0.72}};
    manifest.partition = PartitionSpec::last_n_inputs(5, 2);
    manifest.normalization = Normalization::zscore_per_channel;
    const auto j = manifest_to_json(manifest);
    const CorpusManifest back = manifest_from_json(j, "/somewhere");
    ASSERT_EQ(back.entries.size(), 2u);
    EXPECT_EQ(back.entries[1].subject_id, "S2");
    EXPECT_EQ(back.partition.state_indices, manifest.partition.state_indices);
    EXPECT_EQ(back.normalization, Normalization::zscore_per_channel);
}

TEST(Manifest, DuplicateKeyRejected) {
    nlohmann::json j;
    j["entries"] = {{{"path", "a.csv"}, {"subject", "S1"}, {"task", "rest"}, {"session", "A"}, {"dt", 1.0}},
                    {{"path", "b.csv"}, {"subject", "S1"}, {"task", "rest"}, {"session", "A"}, {"dt", 1.0}}};
    j["states"] = {0, 1};
    j["inputs"] = {2};
    j["normalization"] = "none";
    EXPECT_THROW(manifest_from_json(j, "."), ValidationError);
}

TEST(Manifest, MissingFileNamedInError) {
    const auto dir = make_temp_dir("missing_file");
    CorpusManifest manifest;
    manifest.base_dir = dir;
    manifest.entries = {{"nope.csv", "S1", "rest", "A", 1.0}};
    manifest.partition = PartitionSpec::last_n_inputs(3, 1);
    try {
        load_corpus(manifest);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& ex) {
        EXPECT_NE(std::string(ex.what()).find("nope.csv"), std::string::npos);
    }
}
