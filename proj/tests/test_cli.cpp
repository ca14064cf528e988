#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

namespace {

namespace fs = std::filesystem;

std::string cli_path() {
    const char* env = std::getenv("NTK_CLI_BIN");
    REQUIRE(env != nullptr);
    return env;
}

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    const fs::path out = fs::temp_directory_path() / "ntk_cli_test_out.txt";
    const std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult result;
    result.exit_code = WEXITSTATUS(status);
    std::ifstream in(out);
    std::ostringstream buf;
    buf << in.rdbuf();
    result.output = buf.str();
    return result;
}

fs::path write_model(const std::string& name, const std::string& text) {
    const fs::path path = fs::temp_directory_path() / name;
    std::ofstream out(path);
    out << text;
    return path;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

TEST_CASE("cli compute is byte-identical across runs with a fixed seed") {
    const fs::path model = write_model(
        "ntk_cli_model.json",
        R"({"family":"fcn","depth":3,"width":16,"output_size":4,"nonlinearity":"relu","bias":false})");
    const fs::path out1 = fs::temp_directory_path() / "ntk_out1.json";
    const fs::path out2 = fs::temp_directory_path() / "ntk_out2.json";
    auto r1 = run_cli("compute --model " + model.string() + " --method auto --n1 2 --n2 2 " +
                      "--seed 7 --count-flops --values --sequential --out " + out1.string());
    auto r2 = run_cli("compute --model " + model.string() + " --method auto --n1 2 --n2 2 " +
                      "--seed 7 --count-flops --values --sequential --out " + out2.string());
    CHECK(r1.exit_code == 0);
    CHECK(r2.exit_code == 0);
    const std::string a = read_file(out1), b = read_file(out2);
    CHECK(!a.empty());
    CHECK(a == b);
}

TEST_CASE("cli compute records the auto-selected method") {
    const fs::path model = write_model(
        "ntk_cli_model2.json",
        R"({"family":"fcn","depth":3,"width":16,"output_size":4,"nonlinearity":"relu","bias":false})");
    auto r = run_cli("compute --model " + model.string() + " --method auto --n1 2 --n2 2 --seed 0");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("\"method\": \"structured_derivatives\"") != std::string::npos);
}

TEST_CASE("cli exit codes: bad spec file") {
    auto missing = run_cli("compute --model /does/not/exist.json");
    CHECK(missing.exit_code == 2);
    const fs::path bad = write_model("ntk_bad_model.json", "{\"family\":\"fcn\"}");
    auto malformed = run_cli("compute --model " + bad.string());
    CHECK(malformed.exit_code == 2);
}

TEST_CASE("cli check: default grid passes, corruption hook fails") {
    auto ok = run_cli("check --seed 0");
    CHECK(ok.exit_code == 0);
    CHECK(ok.output.find("\"ok\": true") != std::string::npos);
    CHECK(ok.output.find("error_matrix") != std::string::npos);
    auto bad = run_cli("check --seed 0 --corrupt-structure-rule");
    CHECK(bad.exit_code == 3);
}

TEST_CASE("cli check: figure-style cnn matches the oracle") {
    const fs::path model = write_model(
        "ntk_cli_cnn.json",
        R"({"family":"cnn","depth":2,"width":2,"output_size":2,"pixels":8,"filter":3})");
    auto r = run_cli("check --model " + model.string() + " --n1 2 --n2 2 --seed 1");
    CHECK(r.exit_code == 0);
}

TEST_CASE("cli check: oracle cap is enforced via the environment") {
    const fs::path model = write_model(
        "ntk_cli_model3.json",
        R"({"family":"fcn","depth":3,"width":16,"output_size":4})");
    const std::string cmd = "NTK_MEM_CAP_BYTES=128 " + cli_path() + " check --model " +
                            model.string() + " --n1 2 --n2 2 > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 4);
}

TEST_CASE("cli sweep: stable schema, empty grid, error column") {
    const fs::path out = fs::temp_directory_path() / "ntk_sweep.csv";
    auto empty = run_cli("sweep --family fcn --grid-t 3 --grid-o 4 --grid-n 1 "
                         "--methods structured-derivatives --out " + out.string());
    CHECK(empty.exit_code == 0);
    CHECK(read_file(out) ==
          "w,o,n,t,d,f,method,measured_flops,flops_per_entry,predicted_flops,peak_bytes,error\n");

    auto grid = run_cli(
        "sweep --family fcn --grid-w 8,16 --grid-o 2 --grid-n 1,2 --grid-t 2 "
        "--methods jacobian-contraction,structured-derivatives --seed 3 --out " + out.string());
    CHECK(grid.exit_code == 0);
    const std::string csv = read_file(out);
    std::vector<std::string> lines;
    std::istringstream stream(csv);
    std::string line;
    while (std::getline(stream, line)) {
        lines.push_back(line);
    }
    REQUIRE(lines.size() == 9);  // header + 2w * 2n * 2 methods
    CHECK(lines[0] ==
          "w,o,n,t,d,f,method,measured_flops,flops_per_entry,predicted_flops,peak_bytes,error");
    CHECK(lines[1].substr(0, 7) == "8,2,1,2");
}

TEST_CASE("cli cost prints the breakdown") {
    const fs::path model = write_model(
        "ntk_cli_model4.json",
        R"({"family":"fcn","depth":10,"width":64,"output_size":16})");
    auto r = run_cli("cost --model " + model.string() + " --n1 2 --n2 2");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("n2_o2_t_w2") != std::string::npos);
    CHECK(r.output.find("41943040") != std::string::npos);
}

TEST_CASE("cli compute supports the csv format") {
    const fs::path model = write_model(
        "ntk_cli_model5.json",
        R"({"family":"fcn","depth":2,"width":8,"output_size":2})");
    auto r = run_cli("compute --model " + model.string() + " --format csv --n1 1 --n2 1");
    CHECK(r.exit_code == 0);
    CHECK(r.output.substr(0, 5) == "w,o,n");
    CHECK(r.output.find("8,2,1,2,1,1,") != std::string::npos);
}
