#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "skid/arrangements.hpp"

using namespace skid;
namespace fs = std::filesystem;

TEST(Arrangement, ValidityChecks) {
    EXPECT_TRUE((Arrangement{{0, 1, 2}}).valid());
    EXPECT_TRUE((Arrangement{{2, 0, 1}}).valid());
    EXPECT_FALSE((Arrangement{{0, 0, 1}}).valid());
    EXPECT_FALSE((Arrangement{{0, 1, 3}}).valid());
    EXPECT_FALSE((Arrangement{{-1, 1, 0}}).valid());
}

TEST(Arrangement, ApplyPlacesInputIAtSlotPermI) {
    const Arrangement a{{2, 0, 1}};
    const std::vector<char> items = {'a', 'b', 'c'};
    const auto out = apply_arrangement(items, a);
    // element 0 goes to slot 2, element 1 to slot 0, element 2 to slot 1
    EXPECT_EQ(out, (std::vector<char>{'b', 'c', 'a'}));
}

TEST(Arrangement, InverseUndoesApply) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Arrangement a = identity_arrangement(9);
        std::shuffle(a.perm.begin(), a.perm.end(), rng.engine());
        std::vector<int> items(9);
        for (auto& v : items) v = static_cast<int>(rng.uniform_int(0, 1000));
        const auto jumbled = apply_arrangement(items, a);
        EXPECT_EQ(apply_arrangement(jumbled, invert_arrangement(a)), items);
    }
}

TEST(Arrangement, ApplySizeMismatchThrows) {
    const Arrangement a{{0, 1, 2}};
    const std::vector<int> items = {1, 2};
    EXPECT_THROW(apply_arrangement(items, a), std::invalid_argument);
}

TEST(GenerateArrangementSet, BasicContract) {
    const auto set = generate_arrangement_set(9, 100, 42);
    EXPECT_EQ(set.n_patches, 9);
    EXPECT_EQ(set.k(), 100);
    std::set<std::vector<int>> uniq;
    for (const auto& a : set.arrangements) {
        EXPECT_EQ(a.perm.size(), 9u);
        EXPECT_TRUE(a.valid());
        uniq.insert(a.perm);
    }
    EXPECT_EQ(uniq.size(), 100u);  // pairwise distinct
}

TEST(GenerateArrangementSet, DeterministicUnderSeed) {
    const auto a = generate_arrangement_set(9, 50, 7);
    const auto b = generate_arrangement_set(9, 50, 7);
    const auto c = generate_arrangement_set(9, 50, 8);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(GenerateArrangementSet, FullEnumerationOfSmallSpace) {
    // 4 patches -> 4! = 24 permutations; asking for all of them must yield
    // the entire space
    const auto set = generate_arrangement_set(4, 24, 3);
    std::set<std::vector<int>> uniq;
    for (const auto& a : set.arrangements) uniq.insert(a.perm);
    EXPECT_EQ(uniq.size(), 24u);
}

TEST(GenerateArrangementSet, RejectsBadArguments) {
    EXPECT_THROW(generate_arrangement_set(8, 10, 0), std::invalid_argument);   // not square
    EXPECT_THROW(generate_arrangement_set(4, 25, 0), std::invalid_argument);   // k > 4!
    EXPECT_THROW(generate_arrangement_set(9, 0, 0), std::invalid_argument);    // k < 1
}

TEST(ArrangementSetIO, RoundTrip) {
    const auto set = generate_arrangement_set(9, 37, 99);
    const std::string path = (fs::temp_directory_path() / "arr_roundtrip.txt").string();
    save_arrangement_set(set, path);
    const auto back = load_arrangement_set(path);
    EXPECT_EQ(set, back);
    fs::remove(path);
}

TEST(ArrangementSetIO, LabelOrderIsStable) {
    const auto set = generate_arrangement_set(9, 10, 1);
    const std::string path = (fs::temp_directory_path() / "arr_order.txt").string();
    save_arrangement_set(set, path);
    const auto back = load_arrangement_set(path);
    for (int i = 0; i < 10; ++i)
        EXPECT_EQ(set.arrangements[static_cast<std::size_t>(i)],
                  back.arrangements[static_cast<std::size_t>(i)]);
    fs::remove(path);
}

TEST(ArrangementSetIO, RejectsCorruptFiles) {
    const std::string path = (fs::temp_directory_path() / "arr_bad.txt").string();
    {
        std::ofstream f(path);
        f << "NOTSKID v1 N=9 K=1 SEED=0\n0,1,2,3,4,5,6,7,8\n";
    }
    EXPECT_THROW(load_arrangement_set(path), std::runtime_error);
    {
        std::ofstream f(path);
        f << "SKIDARR v1 N=9 K=2 SEED=0\n0,1,2,3,4,5,6,7,8\n";  // K says 2, file has 1
    }
    EXPECT_THROW(load_arrangement_set(path), std::runtime_error);
    {
        std::ofstream f(path);
        f << "SKIDARR v1 N=9 K=1 SEED=0\n0,1,2,3,4,5,6,7,7\n";  // not a permutation
    }
    EXPECT_THROW(load_arrangement_set(path), std::runtime_error);
    fs::remove(path);
}
