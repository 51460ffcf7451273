#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("sem_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

int semctl(const std::string& args) {
    const std::string cmd = std::string(SEMCTL_PATH) + " " + args + " >" + (workdir() / "out.txt").string() + " 2>" +
                            (workdir() / "err.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file(const std::string& name) {
    std::ifstream in(workdir() / name);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string tiny(const std::string& sub, int epochs = 0) {
    return "--set depth=11 --set synthetic_train=32 --set synthetic_test=32 --set batch_size=16 --set epochs=" +
           std::to_string(epochs) + " -o " + (workdir() / sub).string();
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(semctl(""), 2);
    EXPECT_EQ(semctl("frobnicate"), 2);
    EXPECT_EQ(semctl("train --set depthh=20"), 2);
    EXPECT_EQ(semctl("train --set depth=21"), 2);
    EXPECT_EQ(semctl("train --set depth"), 2);
    EXPECT_EQ(semctl("gradcheck no_such_op"), 2);
    EXPECT_EQ(semctl("ablate nonsense " + tiny("u")), 2);
    EXPECT_EQ(semctl("random-ops --arity 3 " + tiny("u")), 2);
    EXPECT_NE(file("err.txt").find("arity"), std::string::npos) << file("err.txt");
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(semctl("--help"), 0); }

TEST(Cli, TrainEvalExportFlow) {
    ASSERT_EQ(semctl("train " + tiny("run", 1)), 0) << file("err.txt");
    const auto ckpt = (workdir() / "run" / "final.ckpt").string();
    ASSERT_EQ(semctl("eval " + ckpt), 0) << file("err.txt");
    EXPECT_NE(file("out.txt").find("top1="), std::string::npos);
    ASSERT_EQ(semctl("export-decisions " + ckpt + " --sample 8"), 0) << file("err.txt");
    EXPECT_EQ(file("out.txt").rfind("layer_index,stage,channels,", 0), 0u);
}

TEST(Cli, ConfigFileThenOverrides) {
    {
        std::ofstream(workdir() / "cfg.txt") << "depth=47\nattention=se\n";
    }
    ASSERT_EQ(semctl("train -c " + (workdir() / "cfg.txt").string() + " " + tiny("cfgrun")), 0) << file("err.txt");
    const auto resolved = file("cfgrun/config.txt");
    EXPECT_NE(resolved.find("depth=11\n"), std::string::npos) << resolved;
    EXPECT_NE(resolved.find("attention=se\n"), std::string::npos) << resolved;
    EXPECT_EQ(semctl("train -c " + (workdir() / "missing.txt").string()), 2);
}

TEST(Cli, ExportOnNonSemCheckpointExitsTwo) {
    ASSERT_EQ(semctl("train --set attention=none " + tiny("plain")), 0) << file("err.txt");
    EXPECT_EQ(semctl("export-decisions " + (workdir() / "plain" / "final.ckpt").string()), 2);
}

TEST(Cli, IngestionAndIntegrityFailuresExitThree) {
    const auto empty = workdir() / "empty_data";
    fs::create_directories(empty);
    EXPECT_EQ(semctl("train --set dataset=cifar10 --set data_dir=" + empty.string() + " " + tiny("c10")), 3);
    {
        std::ofstream(empty / "data_batch_1.bin", std::ios::binary) << std::string(3073 * 2 + 5, '\0');
    }
    EXPECT_EQ(semctl("train --set dataset=cifar10 --set data_dir=" + empty.string() + " " + tiny("c10")), 3);
    EXPECT_NE(file("err.txt").find("byte offset"), std::string::npos) << file("err.txt");

    {
        std::ofstream(workdir() / "junk.ckpt") << "not a checkpoint at all";
    }
    EXPECT_EQ(semctl("eval " + (workdir() / "junk.ckpt").string()), 3);
}

TEST(Cli, DivergenceExitsFour) {
    EXPECT_EQ(semctl("train --set lr=1e30 --set lr_milestones=none " + tiny("nan", 2)), 4);
    EXPECT_NE(file("err.txt").find("first offending layer"), std::string::npos) << file("err.txt");
    EXPECT_EQ(semctl("ablate decision_removal --set lr=1e30 --set lr_milestones=none " + tiny("nan_grid", 2)), 4);
}

TEST(Cli, GradcheckSingleScope) {
    EXPECT_EQ(semctl("gradcheck switch"), 0) << file("out.txt");
    EXPECT_NE(file("out.txt").find("gradcheck passed"), std::string::npos);
    EXPECT_EQ(semctl("gradcheck --list"), 0);
    EXPECT_NE(file("out.txt").find("full-block"), std::string::npos);
}
