#include <gtest/gtest.h>

#include <unistd.h>

#include "sem/sem.hpp"

using namespace sem;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("sem_ckpt_" + std::to_string(::getpid())) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<CheckpointRecord> sample_records() {
    std::vector<float> f = {1.5f, -2.25f, 0.0f, 3.0e-7f, -0.0f, 1e30f};
    std::vector<double> d = {0.1, -0.2, 0.3};
    return {make_record<float>("a.weight", {2, 3}, f), make_record<double>("b.stat", {3}, d),
            make_text_record("meta.note", "hello\nworld=1\n")};
}

RunConfig tiny_config(const fs::path& dir) {
    RunConfig cfg;
    cfg.depth = 11;
    cfg.epochs = 0;
    cfg.synthetic_train = 40;
    cfg.synthetic_test = 40;
    cfg.output_dir = dir.string();
    return cfg;
}

}  // namespace

TEST(Crc32, StandardCheckValue) {
    const std::string s = "123456789";
    std::vector<std::uint8_t> bytes(s.begin(), s.end());
    EXPECT_EQ(crc32(bytes), 0xCBF43926u);
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
    auto records = sample_records();
    auto decoded = decode_checkpoint(encode_checkpoint(records));
    ASSERT_EQ(decoded.size(), records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        EXPECT_EQ(decoded[i].name, records[i].name);
        EXPECT_EQ(decoded[i].dtype, records[i].dtype);
        EXPECT_EQ(decoded[i].shape, records[i].shape);
        EXPECT_EQ(decoded[i].bytes, records[i].bytes);
    }
    auto f = record_values<float>(decoded[0]);
    EXPECT_EQ(f[1], -2.25f);
    EXPECT_TRUE(std::signbit(f[4]));
    EXPECT_EQ(record_values<double>(decoded[1])[2], 0.3);
    EXPECT_EQ(record_text(decoded[2]), "hello\nworld=1\n");
}

TEST(Checkpoint, EveryFlippedByteIsDetected) {
    const auto good = encode_checkpoint(sample_records());
    for (std::size_t i = 0; i < good.size(); ++i) {
        auto bad = good;
        bad[i] ^= 0x5A;
        EXPECT_THROW(decode_checkpoint(bad), IntegrityError) << "byte " << i;
    }
}

TEST(Checkpoint, EveryTruncationIsDetected) {
    const auto good = encode_checkpoint(sample_records());
    for (std::size_t n = 0; n < good.size(); ++n) {
        std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n));
        EXPECT_THROW(decode_checkpoint(cut), IntegrityError) << "length " << n;
    }
}

TEST(Checkpoint, BadMagicNamedInError) {
    auto bytes = encode_checkpoint(sample_records());
    bytes[0] = 'X';
    try {
        decode_checkpoint(bytes);
        FAIL();
    } catch (const IntegrityError& e) {
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, MissingFileIsIntegrityError) {
    EXPECT_THROW(read_checkpoint("/nonexistent/dir/x.ckpt"), IntegrityError);
}

TEST(Checkpoint, ModelRecordsShapeMismatchAndMissing) {
    NetworkConfig cfg;
    cfg.depth = 11;
    cfg.attention = AttentionMode::sem;
    auto model = build_network<float>(cfg, RngState(1));
    auto records = model_records(model);

    auto missing = records;
    missing.erase(missing.begin() + 3);
    EXPECT_THROW(load_model_records(model, missing), IntegrityError);

    NetworkConfig wider = cfg;
    wider.num_classes = 100;
    auto other = build_network<float>(wider, RngState(1));
    EXPECT_THROW(load_model_records(other, records), IntegrityError);
}

TEST(Checkpoint, StateIncludesRunningStatistics) {
    NetworkConfig cfg;
    cfg.depth = 11;
    auto model = build_network<float>(cfg, RngState(2));
    bool found = false;
    for (const auto& r : model_records(model)) found = found || r.name.find("running_var") != std::string::npos;
    EXPECT_TRUE(found);
}

TEST(RunCheckpoint, SaveLoadEvalAgrees) {
    const auto dir = scratch("roundtrip");
    auto cfg = tiny_config(dir);
    cfg.epochs = 1;
    cfg.batch_size = 20;
    const auto data = load_datasets(cfg);
    auto result = train_run(cfg, data);

    auto run = load_run_checkpoint<float>(result.final_checkpoint);
    EXPECT_EQ(config_text(run.config), config_text(cfg));
    const double after = evaluate_top1(run.model, data.test, 16, run.norm);
    EXPECT_NEAR(after, result.final_test_top1, 1e-6);

    // a second save of the loaded model is byte-identical to the first
    const auto again = dir / "again.ckpt";
    save_run_checkpoint(again, run.model, run.config, run.norm);
    EXPECT_EQ(read_file_bytes(again), read_file_bytes(result.final_checkpoint));
}

TEST(RunCheckpoint, LogitsBitIdenticalAfterReload) {
    const auto dir = scratch("logits");
    auto cfg = tiny_config(dir);
    cfg.attention = "sem";
    const auto data = load_datasets(cfg);
    auto result = train_run(cfg, data);
    auto a = load_run_checkpoint<float>(result.final_checkpoint);
    auto b = load_run_checkpoint<float>(result.final_checkpoint);
    BatchOptions opts;
    opts.shuffle = false;
    opts.normalization = a.norm;
    BatchIterator<float> it(data.test, data.test.size(), 0, 0, opts);
    auto batch = it.next();
    NoGradGuard ng;
    auto la = a.model.forward(batch->images, Mode::eval);
    auto lb = b.model.forward(batch->images, Mode::eval);
    for (std::size_t i = 0; i < la.numel(); ++i) ASSERT_EQ(la.data()[i], lb.data()[i]);
}

TEST(RunCheckpoint, CorruptFileRejectedByEval) {
    const auto dir = scratch("corrupt");
    auto cfg = tiny_config(dir);
    auto result = train_run(cfg);
    auto bytes = read_file_bytes(result.final_checkpoint);
    bytes[bytes.size() / 2] ^= 1;
    std::ofstream(result.final_checkpoint, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    EXPECT_THROW(cmd_eval(result.final_checkpoint), IntegrityError);
}

TEST(RunCheckpoint, PlainCheckpointWithoutMetadataRejected) {
    const auto dir = scratch("nometa");
    NetworkConfig cfg;
    cfg.depth = 11;
    auto model = build_network<float>(cfg, RngState(3));
    write_checkpoint(dir / "m.ckpt", model_records(model));
    EXPECT_THROW(load_run_checkpoint<float>(dir / "m.ckpt"), IntegrityError);
}
