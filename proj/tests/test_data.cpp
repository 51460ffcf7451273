#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <map>

#include "sem/data.hpp"

using namespace sem;
namespace fs = std::filesystem;

namespace {

DatasetRecord random_record(RngState& rng, int label, int coarse = -1) {
    DatasetRecord r;
    r.label = label;
    r.coarse_label = coarse;
    r.image.resize(kImagePixels);
    for (auto& v : r.image) v = static_cast<float>(rng.integer(0, 255)) / 255.0f;
    return r;
}

std::vector<std::uint8_t> encode_all(const std::vector<DatasetRecord>& rs, CifarVariant v) {
    std::vector<std::uint8_t> out;
    for (const auto& r : rs) {
        auto b = encode_cifar(r, v);
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

class TempDir {
  public:
    TempDir() : path_(fs::temp_directory_path() / ("sem_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                                   "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

  private:
    fs::path path_;
};

}  // namespace

TEST(CifarFormat, StridesAndFileSizes) {
    EXPECT_EQ(record_stride(CifarVariant::cifar10), 3073u);
    EXPECT_EQ(record_stride(CifarVariant::cifar100), 3074u);
    EXPECT_EQ(10000 * record_stride(CifarVariant::cifar10), 30730000u);
    EXPECT_EQ(1 + 3 * 32 * 32, 3073);
}

TEST(CifarFormat, RoundTripIsBitIdentical) {
    RngState rng(1);
    for (auto variant : {CifarVariant::cifar10, CifarVariant::cifar100}) {
        std::vector<DatasetRecord> rs;
        for (int i = 0; i < 20; ++i)
            rs.push_back(random_record(rng, i % num_classes(variant), variant == CifarVariant::cifar100 ? i % 20 : -1));
        auto bytes = encode_all(rs, variant);
        EXPECT_EQ(bytes.size(), 20 * record_stride(variant));
        auto decoded = decode_cifar(bytes, variant);
        EXPECT_EQ(decoded, rs);
        EXPECT_EQ(encode_all(decoded, variant), bytes);
    }
}

TEST(CifarFormat, ChannelPlanarRowMajorLayout) {
    std::vector<std::uint8_t> bytes(3073, 0);
    bytes[0] = 7;
    bytes[1 + 1024 + 32 * 2 + 5] = 255;  // G channel, row 2, column 5
    auto r = decode_cifar(bytes, CifarVariant::cifar10).at(0);
    EXPECT_EQ(r.label, 7);
    EXPECT_EQ(r.image[1024 + 2 * 32 + 5], 1.0f);
    EXPECT_EQ(std::count(r.image.begin(), r.image.end(), 0.0f), 3071);
}

TEST(CifarFormat, TruncationAndLabelErrorsCarryOffsets) {
    RngState rng(2);
    auto bytes = encode_all({random_record(rng, 1), random_record(rng, 2)}, CifarVariant::cifar10);
    bytes.pop_back();
    try {
        decode_cifar(bytes, CifarVariant::cifar10);
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_EQ(e.offset(), 3073u);
    }
    bytes.push_back(0);
    bytes[3073] = 12;
    try {
        decode_cifar(bytes, CifarVariant::cifar10);
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_EQ(e.offset(), 3073u);
        EXPECT_NE(std::string(e.what()).find("label 12"), std::string::npos);
    }
}

TEST(CifarFormat, Cifar100FileReadAsCifar10IsRejected) {
    RngState rng(3);
    std::vector<DatasetRecord> rs;
    for (int i = 0; i < 10; ++i) rs.push_back(random_record(rng, 50 + i, 15));
    auto bytes = encode_all(rs, CifarVariant::cifar100);
    EXPECT_THROW(decode_cifar(bytes, CifarVariant::cifar10), IngestionError);

    // 3073 records of stride 3074 divide evenly by 3073; the label check catches it instead
    std::vector<DatasetRecord> many(3073, rs[0]);
    auto even = encode_all(many, CifarVariant::cifar100);
    ASSERT_EQ(even.size() % 3073, 0u);
    EXPECT_THROW(decode_cifar(even, CifarVariant::cifar10), IngestionError);
}

TEST(CifarFormat, RecordCountMismatchNamesFile) {
    TempDir dir;
    RngState rng(4);
    write_bytes(dir.path() / "data_batch_1.bin", encode_all({random_record(rng, 3)}, CifarVariant::cifar10));
    try {
        load_cifar_file(dir.path() / "data_batch_1.bin", CifarVariant::cifar10, 10000);
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_NE(std::string(e.what()).find("expected 10000"), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_cifar(dir.path() / "missing", CifarVariant::cifar10), IngestionError);
}

TEST(CifarFormat, LoadsFullSizeCifar10Layout) {
    TempDir dir;
    const fs::path root = dir.path() / "cifar-10-batches-bin";
    fs::create_directories(root);
    std::vector<std::uint8_t> file(10000 * 3073, 0);
    for (int f = 1; f <= 6; ++f) {
        for (std::size_t i = 0; i < 10000; ++i) file[i * 3073] = static_cast<std::uint8_t>((i + f) % 10);
        write_bytes(root / (f <= 5 ? "data_batch_" + std::to_string(f) + ".bin" : "test_batch.bin"), file);
        EXPECT_EQ(fs::file_size(root / (f <= 5 ? "data_batch_" + std::to_string(f) + ".bin" : "test_batch.bin")),
                  30730000u);
    }
    auto splits = load_cifar(dir.path(), CifarVariant::cifar10);
    EXPECT_EQ(splits.train.size(), 50000u);
    EXPECT_EQ(splits.test.size(), 10000u);
    EXPECT_EQ(splits.train[10000].label, 2);  // first record of data_batch_2
    EXPECT_EQ(splits.test[0].label, 6);
}

TEST(Normalize, IdentityAndConstantImage) {
    RngState rng(5);
    auto r = random_record(rng, 0);
    EXPECT_EQ(normalize(r, ChannelStats{}), r);

    ChannelStats s{{0.2, 0.4, 0.6}, {0.1, 0.2, 0.3}};
    DatasetRecord flat;
    flat.image.resize(kImagePixels);
    for (std::size_t c = 0; c < 3; ++c)
        std::fill_n(flat.image.begin() + static_cast<std::ptrdiff_t>(c * kImagePlane), kImagePlane, static_cast<float>(s.mean[c]));
    for (float v : normalize(flat, s).image) EXPECT_NEAR(v, 0.0f, 1e-6f);

    s.std[1] = 0.0;
    EXPECT_THROW(normalize(r, s), DomainError);
}

TEST(Normalize, TrainSplitStatisticsBecomeStandard) {
    auto rs = synthetic_dataset(200, 10, 6);
    const auto stats = compute_channel_stats(rs);
    for (auto& r : rs) normalize_in_place(r, stats);
    // recompute independently in double precision
    for (std::size_t c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        const double n = static_cast<double>(rs.size() * kImagePlane);
        for (const auto& r : rs)
            for (std::size_t p = 0; p < kImagePlane; ++p) sum += r.image[c * kImagePlane + p];
        const double mean = sum / n;
        for (const auto& r : rs)
            for (std::size_t p = 0; p < kImagePlane; ++p) sq += std::pow(r.image[c * kImagePlane + p] - mean, 2);
        EXPECT_NEAR(mean, 0.0, 1e-3);
        EXPECT_NEAR(std::sqrt(sq / n), 1.0, 1e-3);
    }
}

TEST(Augment, DisabledIsIdentityAndShapePreserved) {
    RngState rng(7);
    auto r = random_record(rng, 4);
    AugmentConfig off;
    off.enabled = false;
    EXPECT_EQ(augment(r, off, rng), r);
    AugmentConfig on;
    for (int i = 0; i < 50; ++i) {
        auto a = augment(r, on, rng);
        EXPECT_EQ(a.image.size(), kImagePixels);
        EXPECT_EQ(a.label, 4);
    }
    on.flip_prob = 1.5;
    EXPECT_THROW(augment(r, on, rng), DomainError);
}

TEST(Augment, FlipIsInvolution) {
    RngState rng(8);
    auto r = random_record(rng, 1);
    EXPECT_EQ(crop_and_flip(crop_and_flip(r, 4, 4, 4, true), 4, 4, 4, true), r);
    EXPECT_EQ(crop_and_flip(r, 4, 4, 4, false), r);
}

TEST(Augment, CropOffsetsAndFlipsAreUniform) {
    // Pixel values encode their source coordinates, so the applied (dy, dx, flip) can be
    // read back from the output.
    DatasetRecord marker;
    marker.image.assign(kImagePixels, 0.0f);
    for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) marker.image[y * 32 + x] = static_cast<float>(y * 32 + x + 1);
    AugmentConfig cfg;
    RngState rng(9);
    std::map<std::pair<int, int>, int> cells;
    int flips = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto a = augment(marker, cfg, rng);
        const int v = static_cast<int>(a.image[16 * 32 + 16]) - 1;
        const int right = static_cast<int>(a.image[16 * 32 + 17]) - 1;
        const bool flip = right < v;
        const int sy = v / 32, sx = v % 32;
        const int dy = sy - 16 + 4;
        const int dx = sx - (flip ? 15 : 16) + 4;
        ASSERT_GE(dy, 0);
        ASSERT_LE(dy, 8);
        ASSERT_GE(dx, 0);
        ASSERT_LE(dx, 8);
        cells[{dy, dx}]++;
        flips += flip;
    }
    ASSERT_EQ(cells.size(), 81u);
    const double expected = n / 81.0;
    double chi2 = 0.0;
    for (const auto& [cell, count] : cells) chi2 += std::pow(count - expected, 2) / expected;
    EXPECT_LT(chi2, 112.33);  // 80 degrees of freedom, p = 0.01
    EXPECT_NEAR(flips / static_cast<double>(n), 0.5, 0.0258);  // 2.58 sigma
}

TEST(Synthetic, DeterministicAndBalanced) {
    EXPECT_EQ(synthetic_dataset(50, 10, 3), synthetic_dataset(50, 10, 3));
    EXPECT_NE(synthetic_dataset(50, 10, 3), synthetic_dataset(50, 10, 4));
    auto rs = synthetic_dataset(57, 10, 3);
    std::map<int, int> counts;
    for (const auto& r : rs) {
        counts[r.label]++;
        for (float v : r.image) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
    for (const auto& [label, c] : counts) EXPECT_LE(std::abs(c - 57 / 10), 1);
    EXPECT_THROW(synthetic_dataset(5, 10, 0), DomainError);
}

TEST(Synthetic, LinearProbeSeparatesTrainingSet) {
    auto rs = synthetic_dataset(200, 10, 10);
    const Eigen::Index n = static_cast<Eigen::Index>(rs.size()), d = static_cast<Eigen::Index>(kImagePixels) + 1;
    Eigen::MatrixXd x(n, d);
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, 10);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j + 1 < d; ++j) x(i, j) = rs[static_cast<std::size_t>(i)].image[static_cast<std::size_t>(j)];
        x(i, d - 1) = 1.0;
        y(i, rs[static_cast<std::size_t>(i)].label) = 1.0;
    }
    // minimum-norm least squares via the n x n Gram system (n < d)
    Eigen::MatrixXd gram = x * x.transpose();
    gram.diagonal().array() += 1e-8;
    Eigen::MatrixXd w = x.transpose() * gram.ldlt().solve(y);
    Eigen::MatrixXd scores = x * w;
    int correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index best = 0;
        scores.row(i).maxCoeff(&best);
        correct += best == rs[static_cast<std::size_t>(i)].label;
    }
    EXPECT_EQ(correct, n);
}

TEST(BatchIterator, CoverageOrderAndPartialBatch) {
    auto rs = synthetic_dataset(23, 5, 11);
    BatchIterator<float> it(rs, 5, 7, 0);
    EXPECT_EQ(it.batches(), 5u);
    std::multiset<std::size_t> seen;
    std::vector<std::size_t> sizes;
    while (auto b = it.next()) {
        sizes.push_back(b->labels.size());
        for (std::size_t i = 0; i < b->indices.size(); ++i) {
            seen.insert(b->indices[i]);
            EXPECT_EQ(b->labels[i], rs[b->indices[i]].label);
        }
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{5, 5, 5, 5, 3}));
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < rs.size(); ++i) all.insert(i);
    EXPECT_EQ(seen, all);
}

TEST(BatchIterator, FullBatchAndDeterministicShuffle) {
    auto rs = synthetic_dataset(16, 4, 12);
    BatchIterator<float> whole(rs, 16, 1, 0);
    auto b = whole.next();
    ASSERT_TRUE(b);
    EXPECT_EQ(b->images.shape(), (Shape{16, 3, 32, 32}));
    EXPECT_FALSE(whole.next());

    EXPECT_EQ(epoch_order(100, 3, 2), epoch_order(100, 3, 2));
    EXPECT_NE(epoch_order(100, 3, 2), epoch_order(100, 3, 3));
    EXPECT_THROW(BatchIterator<float>(rs, 0, 1, 0), DomainError);
}

TEST(BatchIterator, AugmentedStreamsAreReproducible) {
    auto rs = synthetic_dataset(12, 4, 13);
    BatchOptions opts;
    opts.augment = AugmentConfig{};
    opts.normalization = compute_channel_stats(rs);
    auto collect = [&] {
        BatchIterator<float> it(rs, 4, 5, 1, opts);
        std::vector<float> all;
        while (auto b = it.next()) all.insert(all.end(), b->images.data().begin(), b->images.data().end());
        return all;
    };
    EXPECT_EQ(collect(), collect());
}
