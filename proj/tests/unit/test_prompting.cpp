#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "kbc/error.hpp"
#include "kbc/prompting.hpp"

using namespace kbc;
using nlohmann::json;

namespace {

std::string fixture(const std::string& name) {
    std::ifstream in(std::string(KBC_SOURCE_DIR) + "/tests/fixtures/responses/" + name);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return Errc::Precondition;
}

const TemplateLibrary& lib() {
    static const TemplateLibrary l = TemplateLibrary::load(TemplateLibrary::default_dir());
    return l;
}

std::string all_text(const std::vector<ChatMessage>& ms) {
    std::string out;
    for (const auto& m : ms) out += m.joined_text() + "\n";
    return out;
}

}  // namespace

TEST(Templates, ShipsEveryTemplate) {
    const auto ids = lib().ids();
    for (auto id : {templates::kExtractionGeneral, templates::kExtractionMedicalXray, templates::kExtractionMedicalReport,
                    templates::kIntegrateCot, templates::kBuildKg, templates::kExpandGeneral, templates::kExpandMedical,
                    templates::kRefineText})
        EXPECT_NE(std::find(ids.begin(), ids.end(), std::string(id)), ids.end()) << id;
    for (auto f : {templates::kReturnFormatGeneral, templates::kReturnFormatMedical, templates::kRepair})
        EXPECT_FALSE(lib().fragment(f).empty()) << f;
}

TEST(Render, ExtractionGeneralObjectCount) {
    const auto ms = lib().render(templates::kExtractionGeneral, {{"input-format", "image"}, {"object-numbers", "5"}});
    bool found = false;
    for (const auto& m : ms)
        if (m.role == Role::User && m.joined_text().find("Identify the top 5 objects") != std::string::npos) found = true;
    EXPECT_TRUE(found);
}

TEST(Render, BuildKgRelationshipCount) {
    const auto ms = lib().render(templates::kBuildKg, {{"input-type", "text"}, {"numbers-of-relationships", "7"}});
    EXPECT_NE(all_text(ms).find("exactly 7 distinct relationships"), std::string::npos);
}

TEST(Render, MissingPlaceholder) {
    EXPECT_EQ(code_of([] { lib().render(templates::kExtractionGeneral, {}); }), Errc::MissingPlaceholder);
    try {
        lib().render(templates::kBuildKg, {{"input-type", "text"}});
    } catch (const Error& e) {
        EXPECT_NE(e.detail().find("numbers-of-relationships"), std::string::npos);
    }
}

TEST(Render, UnknownTemplate) {
    EXPECT_EQ(code_of([] { lib().render("no_such_template", {}); }), Errc::UnknownTemplate);
}

TEST(Render, NoUnresolvedPlaceholdersAndDeterministic) {
    const PlaceholderMap values{{"input-format", "text"}, {"object-numbers", "6"}, {"user-input", "A [dog] runs."}};
    const auto a = lib().render(templates::kExtractionGeneral, values);
    const auto b = lib().render(templates::kExtractionGeneral, values);
    EXPECT_EQ(a, b);
    const std::string text = all_text(a);
    EXPECT_EQ(text.find("[input-format]"), std::string::npos);
    EXPECT_EQ(text.find("[object-numbers]"), std::string::npos);
    // values are inserted verbatim, never rescanned
    EXPECT_NE(text.find("A [dog] runs."), std::string::npos);
}

TEST(Render, AttachmentsBecomeImageParts) {
    const ImagePart img{encode_solid_png(4, 4, {1, 2, 3}), ImageFormat::Png};
    const auto ms = lib().render(templates::kExtractionGeneral, {{"input-format", "image"}, {"object-numbers", "6"}},
                                 {{"user-input", img}});
    std::size_t images = 0;
    for (const auto& m : ms) {
        images += m.image_count();
        if (m.image_count()) EXPECT_EQ(m.role, Role::User);
    }
    EXPECT_EQ(images, 1u);
}

TEST(Render, SystemMessageOnlyWhenDefined) {
    for (const auto& id : lib().ids()) {
        const auto& t = lib().get(id);
        const bool defines = std::any_of(t.messages.begin(), t.messages.end(),
                                         [](const auto& m) { return m.first == Role::System; });
        PlaceholderMap values;
        for (const auto& p : t.placeholders) values[p] = "x";
        const auto ms = lib().render(id, values);
        const bool has = std::any_of(ms.begin(), ms.end(), [](const ChatMessage& m) { return m.role == Role::System; });
        EXPECT_EQ(defines, has) << id;
        EXPECT_EQ(ms.size(), t.messages.size()) << id;
    }
}

TEST(TemplateParsing, RolesAndPlaceholders) {
    const auto t = parse_template("t", "<|system|>\nBe brief.\n<|user|>\nCount [n] things in [where], [n] times.\n");
    ASSERT_EQ(t.messages.size(), 2u);
    EXPECT_EQ(t.messages[0].first, Role::System);
    EXPECT_EQ(t.placeholders, (std::vector<std::string>{"n", "where"}));
    EXPECT_EQ(substitute("a [x] b [x]", {{"x", "1"}}), "a 1 b 1");
    EXPECT_EQ(code_of([] { substitute("a [x]", {}); }), Errc::MissingPlaceholder);
}

TEST(ChatMessageRules, ImagesOnlyInUserMessages) {
    ChatMessage m{Role::Assistant, {ImagePart{"x", ImageFormat::Png}}};
    EXPECT_EQ(code_of([&] { validate(m); }), Errc::InvalidRequest);
    ChatMessage empty{Role::User, {}};
    EXPECT_EQ(code_of([&] { validate(empty); }), Errc::InvalidRequest);
    EXPECT_NO_THROW(validate(ChatMessage{Role::User, {ImagePart{"x", ImageFormat::Png}}}));
}

TEST(JsonBlock, BalancedScanRespectsStrings) {
    const auto j = extract_json_block(R"(Note: {not json} then {"a": "}{ [", "b": [1, {"c": "\"}"}]} trailing })",
                                      JsonKind::Object);
    ASSERT_TRUE(j);
    EXPECT_EQ((*j)["a"], "}{ [");
    EXPECT_EQ((*j)["b"][1]["c"], "\"}");
    EXPECT_FALSE(extract_json_block("no brackets here", JsonKind::Any));
    const auto arr = extract_json_block("{\"x\": 1} and [1, 2]", JsonKind::Array);
    ASSERT_TRUE(arr);
    EXPECT_EQ(arr->size(), 2u);
}

TEST(StructuredExtraction, GeneralShape) {
    const auto sk = parse_structured_extraction(
        "```json\n{\"objects\":[\"dog\"],\"numbers\":{\"dog\":2},\"attributes\":{\"dog\":\"brown\"},\"style\":\"photo\"}\n```",
        Domain::General);
    EXPECT_EQ(sk.objects, (std::vector<std::string>{"dog"}));
    EXPECT_EQ(sk.numbers.at("dog"), 2);
    EXPECT_EQ(sk.attributes.at("dog"), "brown");
    EXPECT_EQ(sk.style, "photo");
}

TEST(StructuredExtraction, WrappingInvariance) {
    const std::string bare = fixture("general.json");
    const auto base = parse_structured_extraction(bare, Domain::General);
    for (const std::string& wrapped :
         {"```json\n" + bare + "```\n", "```\n" + bare + "```", "Here is the structured output:\n" + bare + "\nHope this helps.",
          "Sure.\n```json\n" + bare + "```\nLet me know if you need anything else."}) {
        EXPECT_EQ(parse_structured_extraction(wrapped, Domain::General), base) << wrapped;
    }
}

TEST(StructuredExtraction, RoundTrip) {
    StructuredKnowledge sk;
    sk.objects = {"man", "umbrella"};
    sk.numbers = {{"man", 1}, {"umbrella", 2}};
    sk.attributes = {{"umbrella", "striped, open"}};
    sk.style = "rainy street photograph";
    EXPECT_EQ(parse_structured_extraction(to_json(sk).dump(), Domain::General), sk);
}

TEST(StructuredExtraction, Errors) {
    EXPECT_EQ(code_of([] {
                  parse_structured_extraction(
                      R"({"objects":["dog"],"numbers":{"cat":1},"attributes":{},"style":"x"})", Domain::General);
              }),
              Errc::SchemaViolation);
    EXPECT_EQ(code_of([] { parse_structured_extraction("just words", Domain::General); }), Errc::NoStructuredBlock);
    EXPECT_EQ(code_of([] { parse_structured_extraction(R"({"objects":"dog"})", Domain::General); }),
              Errc::SchemaViolation);
}

TEST(MedicalReport, ParsesFourSections) {
    const auto sk = parse_structured_extraction(fixture("medical.md"), Domain::Medical);
    EXPECT_EQ(sk.domain, Domain::Medical);
    for (const char* o : {"lungs", "heart", "trachea", "opacity", "effusion"})
        EXPECT_NE(std::find(sk.objects.begin(), sk.objects.end(), o), sk.objects.end()) << o;
    EXPECT_NE(sk.style.find("Lung Opacity"), std::string::npos);
    EXPECT_NE(sk.style.find("Further imaging"), std::string::npos);
    EXPECT_NE(sk.attributes.at("opacity").find("ill-defined"), std::string::npos);
}

TEST(MedicalReport, WrappingInvariance) {
    const std::string bare = fixture("medical.md");
    const auto base = parse_structured_extraction(bare, Domain::Medical);
    EXPECT_EQ(parse_structured_extraction("```markdown\n" + bare + "```\n", Domain::Medical), base);
    EXPECT_EQ(parse_structured_extraction("Based on the image, here is my analysis.\n\n" + bare + "\nPlease consult a radiologist.",
                                          Domain::Medical),
              base);
}

TEST(MedicalReport, UnknownDiagnosis) {
    std::string text = fixture("medical.md");
    text.replace(text.find("'Lung Opacity'"), 14, "'Broken Heart'");
    EXPECT_EQ(code_of([&] { parse_structured_extraction(text, Domain::Medical); }), Errc::UnknownDiagnosisLabel);
}

TEST(MedicalReport, MissingSection) {
    std::string text = fixture("medical.md");
    text.erase(text.find("4. **Clinical Implication**"));
    EXPECT_NE(code_of([&] { parse_structured_extraction(text, Domain::Medical); }), Errc::Precondition);
}

TEST(MedicalReport, FourteenLabels) {
    EXPECT_EQ(diagnosis_labels().size(), 14u);
}

TEST(Triplets, ParseAndDedup) {
    const auto one = parse_triplets(R"([{"head":"man","relation":"holds","tail":"umbrella"}])");
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], (Triplet{"man", "holds", "umbrella"}));
    const auto dup = parse_triplets(
        R"([{"head":"Man","relation":"holds","tail":"umbrella"},{"head":"man","relation":"holds","tail":"Umbrella"},{"head":"man","relation":"wears","tail":"hat"}])");
    ASSERT_EQ(dup.size(), 2u);
    EXPECT_EQ(dup[1].relation, "wears");
    EXPECT_EQ(code_of([] { parse_triplets(R"([{"head":"","relation":"r","tail":"x"}])"); }), Errc::SchemaViolation);
    EXPECT_EQ(code_of([] { parse_triplets("nothing"); }), Errc::NoStructuredBlock);
}

TEST(Triplets, WrappingInvariance) {
    const std::string bare = fixture("triplets.json");
    const auto base = parse_triplets(bare);
    EXPECT_EQ(base.size(), 3u);
    EXPECT_EQ(parse_triplets("```json\n" + bare + "```"), base);
    EXPECT_EQ(parse_triplets("Relationships, step by step:\n" + bare + "\nDone."), base);
}

TEST(Descriptions, CountsAndShortList) {
    const auto three = parse_description_list(R"(["a","b","c"])", 3);
    EXPECT_EQ(three.descriptions.size(), 3u);
    EXPECT_FALSE(three.short_list);
    const auto one = parse_description_list(R"(["a"])", 5);
    EXPECT_EQ(one.descriptions.size(), 1u);
    EXPECT_TRUE(one.short_list);
    const auto many = parse_description_list(R"(["a","b","c","d"])", 2);
    EXPECT_EQ(many.descriptions, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(code_of([] { parse_description_list("no list", 3); }), Errc::NoStructuredBlock);
}

TEST(Descriptions, EntriesAreTrimmedAndNonEmpty) {
    const auto d = parse_description_list(R"(["  a dog  ", "", "a cat"])", 3);
    for (const auto& s : d.descriptions) {
        EXPECT_FALSE(s.empty());
        EXPECT_NE(s.front(), ' ');
    }
}
