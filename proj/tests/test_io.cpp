#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "defectlab/network.hpp"
#include "defectlab/patch_io.hpp"
#include "defectlab/pnm.hpp"
#include "defectlab/random.hpp"
#include "defectlab/voc.hpp"
#include "defectlab/weights_io.hpp"

using namespace defectlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                ("defectlab_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

GrayImage ramp(int w, int h) {
    GrayImage img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(x, y) = static_cast<std::uint8_t>((x * 7 + y * 13) % 256);
    return img;
}

nn::NetworkSpec small_spec() {
    nn::NetworkSpec s;
    s.input_shape = {8, 8, 1};
    s.layers = {nn::Conv2D(2, 3), nn::ReLU(), nn::MaxPool(2), nn::Flatten(), nn::Dense(5), nn::Dense(3), nn::Softmax()};
    s.embedding_layer = 4;
    return s;
}

}  // namespace

TEST(Pnm, PgmRoundTrip) {
    const auto img = ramp(13, 7);
    const auto bytes = pnm::encode_pgm(img);
    EXPECT_EQ(bytes.substr(0, 2), "P5");
    EXPECT_EQ(pnm::decode_pgm(bytes), img);
}

TEST(Pnm, PpmRoundTripAndReadAny) {
    TempDir tmp;
    RgbImage rgb(5, 4);
    Rng rng(2);
    for (auto& v : rgb.data()) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    pnm::write_ppm(tmp.path() / "c.ppm", rgb);
    pnm::write_pgm(tmp.path() / "g.pgm", ramp(6, 3));
    GrayImage g;
    RgbImage c;
    EXPECT_FALSE(pnm::read_any(tmp.path() / "c.ppm", g, c));
    EXPECT_EQ(c, rgb);
    EXPECT_TRUE(pnm::read_any(tmp.path() / "g.pgm", g, c));
    EXPECT_EQ(g, ramp(6, 3));
}

TEST(Pnm, HeaderCommentsAreSkipped) {
    const std::string bytes = std::string("P5\n# made by hand\n2 1\n255\n") + '\x05' + '\xfa';
    const auto img = pnm::decode_pgm(bytes);
    EXPECT_EQ(img.width(), 2);
    EXPECT_EQ(img.at(1, 0), 250);
}

TEST(Pnm, Errors) {
    EXPECT_THROW(pnm::decode_pgm("P6\n1 1\n255\n\x01\x02\x03"), FormatError);
    EXPECT_THROW(pnm::decode_pgm("P5\n4 4\n255\n\x01"), FormatError);
    EXPECT_THROW(pnm::decode_pgm("P5\n1 1\n65535\n\x01\x01"), FormatError);
    EXPECT_THROW(pnm::decode_pgm("P5\nx 1\n255\n\x01"), FormatError);
    EXPECT_THROW(pnm::read_pgm("/nonexistent/definitely/missing.pgm"), IoError);
    TempDir tmp;
    spit(tmp.path() / "j.jpg", "\xff\xd8\xff\xe0");
    GrayImage g;
    RgbImage c;
    EXPECT_THROW(pnm::read_any(tmp.path() / "j.jpg", g, c), FormatError);
}

TEST(Voc, ParsesFixture) {
    const auto xml = slurp(fs::path(DEFECTLAB_TEST_DATA) / "weld_0001.xml");
    const auto anns = voc::parse_voc_xml(xml, default_label_map());
    ASSERT_EQ(anns.size(), 4u);
    EXPECT_EQ(anns[0].image_id, "weld_0001.jpg");
    EXPECT_EQ(anns[0].label, static_cast<ClassId>(DefectClass::Crack));
    EXPECT_EQ(anns[0].box, (BoundingBox{4, 10, 40, 22}));
    EXPECT_EQ(anns[1].label, static_cast<ClassId>(DefectClass::Pinhole));  // trimmed, case-folded
    EXPECT_EQ(anns[2].label, static_cast<ClassId>(DefectClass::Hole));
    EXPECT_EQ(anns[2].box.xmin, 60);  // "60.0" accepted
    EXPECT_EQ(anns[3].label, static_cast<ClassId>(DefectClass::Spatter));
    EXPECT_EQ(voc::parse_voc_xml(xml, default_label_map(), "weld_0001")[0].image_id, "weld_0001");
}

TEST(Voc, ZeroObjectsIsEmpty) {
    const auto anns = voc::parse_voc_xml("<annotation><filename>a.png</filename></annotation>", default_label_map());
    EXPECT_TRUE(anns.empty());
}

TEST(Voc, UnknownClassNamesTheOffender) {
    const std::string xml =
        "<annotation><filename>a</filename><object><name>scratch</name><bndbox><xmin>1</xmin><ymin>1</ymin>"
        "<xmax>3</xmax><ymax>3</ymax></bndbox></object></annotation>";
    try {
        voc::parse_voc_xml(xml, default_label_map());
        FAIL() << "expected LabelError";
    } catch (const LabelError& e) {
        EXPECT_NE(std::string(e.what()).find("scratch"), std::string::npos);
        EXPECT_EQ(exit_code(e), 4);
    }
}

TEST(Voc, MalformedInputsAreParseErrors) {
    EXPECT_THROW(voc::parse_voc_xml("<annotation><object>", default_label_map()), ParseError);
    EXPECT_THROW(voc::parse_voc_xml("<other/>", default_label_map()), ParseError);
    EXPECT_THROW(voc::parse_voc_xml("<annotation><object><name>crack</name></object></annotation>", default_label_map()),
                 ParseError);
    EXPECT_THROW(voc::parse_voc_xml("<annotation><object><name>crack</name><bndbox><xmin>a</xmin><ymin>1</ymin>"
                                    "<xmax>3</xmax><ymax>3</ymax></bndbox></object></annotation>",
                                    default_label_map()),
                 ParseError);
    try {
        voc::parse_voc_xml("<annotation><object>", default_label_map());
    } catch (const Error& e) {
        EXPECT_EQ(exit_code(e), 3);
    }
}

TEST(Voc, WriteParseRoundTrip) {
    std::vector<Annotation> anns{{"x", {1, 2, 30, 40}, 0}, {"x", {5, 6, 7, 8}, 3}};
    EXPECT_EQ(voc::parse_voc_xml(voc::write_voc_xml("x.pgm", 64, 64, anns), default_label_map(), "x"), anns);
}

TEST(PatchIo, RoundTripPreservesEverything) {
    TempDir tmp;
    PatchSet set(Split::train);
    for (int i = 0; i < 5; ++i) {
        LabeledPatch p;
        p.id = "p" + std::to_string(i);
        p.patch = ramp(8 + 0, 8);
        p.patch.at(0, 0) = static_cast<std::uint8_t>(i);
        p.label = i % 4;
        p.provenance = i == 3 ? Provenance::pseudo(2) : Provenance::human();
        p.confidence = i == 3 ? 0.8125 : 1.0;
        set.add(p);
    }
    patch_io::write_patch_set(tmp.path(), set);
    const auto back = patch_io::read_patch_set(tmp.path());
    ASSERT_EQ(back.size(), 5u);
    EXPECT_EQ(back.split(), Split::train);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(back[i].id, set[i].id);
        EXPECT_EQ(back[i].patch, set[i].patch);
        EXPECT_EQ(back[i].label, set[i].label);
        EXPECT_EQ(back[i].provenance, set[i].provenance);
        EXPECT_EQ(back[i].confidence, set[i].confidence);
    }
}

TEST(PatchIo, HiddenTruthOnlyOnRequest) {
    TempDir tmp;
    PatchSet pool(Split::pool);
    for (int i = 0; i < 3; ++i) {
        LabeledPatch p;
        p.id = "u" + std::to_string(i);
        p.patch = ramp(8, 8);
        pool.add(p, i);
    }
    patch_io::write_patch_set(tmp.path(), pool);
    const auto blind = patch_io::read_patch_set(tmp.path());
    EXPECT_FALSE(EvaluationAccess::has_hidden_truth(blind));
    const auto seen = patch_io::read_patch_set(tmp.path(), true);
    ASSERT_TRUE(EvaluationAccess::has_hidden_truth(seen));
    EXPECT_EQ(EvaluationAccess::hidden_truth(seen, 2), 2);
    EXPECT_FALSE(seen[0].label.has_value());
}

TEST(PatchIo, Errors) {
    TempDir tmp;
    EXPECT_THROW(patch_io::read_patch_set(tmp.path() / "missing"), IoError);
    spit(tmp.path() / "index.jsonl", "{not json\n");
    EXPECT_THROW(patch_io::read_patch_set(tmp.path()), ParseError);
    spit(tmp.path() / "index.jsonl", R"({"split":"train"})" "\n");
    EXPECT_THROW(patch_io::read_patch_set(tmp.path()), FormatError);
}

TEST(WeightsIo, RoundTripIsBitExact) {
    TempDir tmp;
    const auto spec = small_spec();
    auto params = nn::build(spec, 17);
    params.layers[4].bias[0] = -0.0;
    params.layers[4].bias[1] = 1e-310;  // subnormal
    params.layers[4].bias[2] = 0.1 + 0.2;
    nn::WeightFile wf{spec, params, {}};
    wf.groups.push_back({"extra", {{"k", 1}}, {Tensor({2, 2}, {1.5, -2.25, 3, 4})}});
    nn::save_weights(tmp.path() / "w.tmw", wf);
    const auto back = nn::load_weights(tmp.path() / "w.tmw", spec);
    EXPECT_EQ(back.spec, spec);
    EXPECT_EQ(back.params.seed, 17u);
    ASSERT_EQ(back.params.layers.size(), params.layers.size());
    for (std::size_t i = 0; i < params.layers.size(); ++i)
        for (const auto* pair : {&params.layers[i].weight, &params.layers[i].bias}) {
            const auto& other = pair == &params.layers[i].weight ? back.params.layers[i].weight : back.params.layers[i].bias;
            ASSERT_EQ(pair->size(), other.size());
            EXPECT_EQ(std::memcmp(pair->data(), other.data(), pair->size() * sizeof(double)), 0) << "layer " << i;
        }
    EXPECT_TRUE(std::signbit(back.params.layers[4].bias[0]));
    ASSERT_EQ(back.groups.size(), 1u);
    EXPECT_EQ(back.groups[0].meta["k"], 1);
    EXPECT_EQ(back.groups[0].tensors[0], wf.groups[0].tensors[0]);
    // Re-encoding the loaded file reproduces the bytes.
    EXPECT_EQ(nn::encode_weights(back), slurp(tmp.path() / "w.tmw"));
}

TEST(WeightsIo, CorruptFilesAreFormatErrors) {
    TempDir tmp;
    const auto spec = small_spec();
    const auto bytes = nn::encode_weights({spec, nn::build(spec, 1), {}});
    EXPECT_THROW(nn::decode_weights(""), FormatError);
    EXPECT_THROW(nn::decode_weights("XXXX" + bytes.substr(4)), FormatError);
    EXPECT_THROW(nn::decode_weights(bytes.substr(0, bytes.size() - 8)), FormatError);
    EXPECT_THROW(nn::decode_weights(bytes.substr(0, 20)), FormatError);
    EXPECT_THROW(nn::decode_weights(bytes + "12345678"), FormatError);
    // A header whose tensor shapes disagree with its own network.
    const std::uint32_t len = static_cast<unsigned char>(bytes[4]) | (static_cast<unsigned char>(bytes[5]) << 8);
    auto header = nlohmann::json::parse(bytes.substr(8, len));
    header["spec"]["layers"][4]["units"] = 6;
    header["spec"]["layers"][5]["units"] = 3;
    const auto text = header.dump();
    std::string forged = "TMW1";
    for (int i = 0; i < 4; ++i) forged.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xff));
    forged += text + bytes.substr(8 + len);
    EXPECT_THROW(nn::decode_weights(forged), FormatError);
    EXPECT_THROW(nn::load_weights(tmp.path() / "none.tmw"), IoError);
}

TEST(WeightsIo, DifferentNetworkIsRejected) {
    TempDir tmp;
    const auto spec = small_spec();
    nn::save_weights(tmp.path() / "w.tmw", spec, nn::build(spec, 1));
    auto other = spec;
    other.layers[5] = nn::Dense(4);
    try {
        nn::load_weights(tmp.path() / "w.tmw", other);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 5"), std::string::npos) << e.what();
    }
}
