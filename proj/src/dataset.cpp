#include "anchorfuse/dataset.hpp"

#include "anchorfuse/config.hpp"
#include "anchorfuse/error.hpp"
#include "anchorfuse/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_map>

namespace anchorfuse {

namespace {

const std::vector<std::string> kWords = {
    // class words
    "glioma", "meningioma", "adenoma", "carcinoma", "melanoma", "nevus", "keratosis", "effusion",
    "pneumonia", "edema", "nodule", "fibrosis", "cyst", "polyp", "ulcer", "drusen",
    "cataract", "glaucoma", "retinopathy", "sarcoma", "lymphoma", "hemorrhage", "infarct", "stenosis",
    "aneurysm", "abscess", "calcification", "atelectasis", "pneumothorax", "emphysema", "cardiomegaly",
    "consolidation", "hernia", "schwannoma", "dermatofibroma", "angioma", "papilloma", "lipoma", "osteoma",
    "myeloma", "thrombus", "embolism", "granuloma", "neuroma", "fracture", "scoliosis", "tuberculosis",
    "esophagitis",
    // function words
    "<pad>", "a", "photo", "of", "medical", "image", "with", "showing",
    // descriptors
    "bright", "dark", "fine", "coarse", "horizontal", "vertical", "central", "peripheral",
};

const std::unordered_map<std::string_view, int>& word_index() {
    static const std::unordered_map<std::string_view, int> index = [] {
        std::unordered_map<std::string_view, int> out;
        for (std::size_t i = 0; i < kWords.size(); ++i) {
            out.emplace(kWords[i], static_cast<int>(i));
        }
        return out;
    }();
    return index;
}

constexpr std::string_view kPlaceholder = "{c}";

// Phrase frames used for expert templates; descriptors are appended.
constexpr std::array<std::string_view, 4> kExpertFrames = {
    "{c} with",
    "{c} showing",
    "a medical image of {c} with",
    "a medical image of {c} showing",
};

Tensor render_prototype(const LatentPattern& p, int size, Rng& rng) {
    const double s = static_cast<double>(size);
    const double cycles = p.fine ? 4.0 : 2.0;
    const double sigma = s / 6.0;
    // Low-amplitude seeded background texture.
    std::array<double, 6> field{};
    for (double& v : field) v = rng.uniform();
    Tensor img = Tensor::matrix(1, static_cast<std::size_t>(size * size));
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double u = p.horizontal ? r : c;
            const double grating = 0.18 * std::sin(2.0 * std::numbers::pi * cycles * u / s + p.phase);
            const double dr = r - p.blob_row, dc = c - p.blob_col;
            const double blob = (p.bright ? 0.3 : -0.3) * std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
            const double texture =
                0.05 * std::cos(2.0 * std::numbers::pi * (field[0] * r + field[1] * c) / s + 6.28 * field[2]) +
                0.05 * std::cos(2.0 * std::numbers::pi * (field[3] * r - field[4] * c) / s + 6.28 * field[5]);
            img[static_cast<std::size_t>(r * size + c)] = std::clamp(0.5 + grating + blob + texture, 0.0, 1.0);
        }
    }
    return img;
}

Tensor draw_sample(const Tensor& prototype, double noise_std, Rng& rng) {
    Tensor img = prototype;
    if (noise_std > 0.0) {
        for (double& v : img.values()) {
            v = std::clamp(v + rng.normal(0.0, noise_std), 0.0, 1.0);
        }
    }
    return img;
}

} // namespace

const std::vector<std::string>& lexicon() { return kWords; }

int token_id(std::string_view word) {
    const auto& index = word_index();
    auto it = index.find(word);
    if (it == index.end()) {
        fail(ErrorCategory::invalid_argument, "unknown word '" + std::string(word) + "'");
    }
    return it->second;
}

int pad_token_id() { return static_cast<int>(kClassWordCount); }

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        ids.push_back(token_id(word));
    }
    return ids;
}

const char* category_name(TemplateCategory category) {
    switch (category) {
    case TemplateCategory::minimal: return "minimal";
    case TemplateCategory::article: return "article";
    case TemplateCategory::generic: return "generic";
    case TemplateCategory::abstract: return "abstract";
    case TemplateCategory::extreme: return "extreme";
    }
    return "unknown";
}

TemplateCategory parse_template_category(std::string_view name) {
    for (auto c : {TemplateCategory::minimal, TemplateCategory::article, TemplateCategory::generic,
                   TemplateCategory::abstract, TemplateCategory::extreme}) {
        if (name == category_name(c)) {
            return c;
        }
    }
    fail(ErrorCategory::config, "unknown template category '" + std::string(name) + "'");
}

PromptTemplate PromptTemplate::of(TemplateCategory category) {
    switch (category) {
    case TemplateCategory::minimal: return {"{c}", category};
    case TemplateCategory::article: return {"a {c}", category};
    case TemplateCategory::generic: return {"a photo of {c}", category};
    case TemplateCategory::abstract: return {"medical image of {c}", category};
    case TemplateCategory::extreme: return {"", category};
    }
    fail(ErrorCategory::invalid_argument, "unknown template category");
}

std::vector<PromptTemplate> robustness_templates() {
    return {PromptTemplate::of(TemplateCategory::minimal), PromptTemplate::of(TemplateCategory::article),
            PromptTemplate::of(TemplateCategory::generic), PromptTemplate::of(TemplateCategory::abstract),
            PromptTemplate::of(TemplateCategory::extreme)};
}

std::vector<int> expand_pattern(std::string_view pattern, std::string_view class_name) {
    const int class_id = token_id(class_name);
    if (class_id >= static_cast<int>(kClassWordCount)) {
        fail(ErrorCategory::invalid_argument, "'" + std::string(class_name) + "' is not a class word");
    }
    std::string text(pattern);
    for (auto pos = text.find(kPlaceholder); pos != std::string::npos; pos = text.find(kPlaceholder)) {
        text.replace(pos, kPlaceholder.size(), class_name);
    }
    return tokenize(text);
}

std::vector<int> expand_template(const PromptTemplate& prompt, std::string_view class_name) {
    if (prompt.pattern.empty()) {
        token_id(class_name); // still validate the class name
        return {pad_token_id()};
    }
    return expand_pattern(prompt.pattern, class_name);
}

std::vector<std::string> LatentPattern::descriptors() const {
    return {bright ? "bright" : "dark", fine ? "fine" : "coarse", horizontal ? "horizontal" : "vertical",
            central ? "central" : "peripheral"};
}

void SyntheticTaskSpec::validate() const {
    if (classes < 2) fail(ErrorCategory::config, "task needs at least 2 classes");
    if (classes > static_cast<int>(kClassWordCount)) {
        fail(ErrorCategory::config, "task asks for " + std::to_string(classes) + " classes but the lexicon has " +
                                        std::to_string(kClassWordCount));
    }
    if (k_max < 1) fail(ErrorCategory::config, "k_max must be >= 1");
    if (queries_per_class < 1) fail(ErrorCategory::config, "queries_per_class must be >= 1");
    if (image_size < 1) fail(ErrorCategory::config, "image_size must be >= 1");
    if (!(noise_std >= 0.0)) fail(ErrorCategory::config, "noise_std must be >= 0");
    if (template_pool_size < 1) fail(ErrorCategory::config, "template_pool_size must be >= 1");
    if (!(base_fraction > 0.0 && base_fraction < 1.0)) fail(ErrorCategory::config, "base_fraction must lie in (0, 1)");
}

std::vector<Tensor> FewShotTask::support_images(int c, int k) const {
    if (c < 0 || c >= class_count()) {
        fail(ErrorCategory::invalid_argument, "class index " + std::to_string(c) + " out of range");
    }
    if (k < 1 || k > static_cast<int>(support[static_cast<std::size_t>(c)].size())) {
        fail(ErrorCategory::invalid_argument, "class " + std::to_string(c) + " has " +
                                                  std::to_string(support[static_cast<std::size_t>(c)].size()) +
                                                  " support images, " + std::to_string(k) + " requested");
    }
    std::vector<Tensor> out;
    for (int i = 0; i < k; ++i) {
        out.push_back(support[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)].pixels);
    }
    return out;
}

FewShotTask generate_task(const SyntheticTaskSpec& spec) {
    spec.validate();
    FewShotTask task;
    task.spec = spec;
    const auto classes = static_cast<std::size_t>(spec.classes);

    Rng naming(derive_seed(spec.seed, 1));
    std::vector<int> words(kClassWordCount);
    for (std::size_t i = 0; i < words.size(); ++i) words[i] = static_cast<int>(i);
    naming.shuffle(words.begin(), words.end());
    for (std::size_t c = 0; c < classes; ++c) {
        task.class_names.push_back(kWords[static_cast<std::size_t>(words[c])]);
    }

    // Distinct attribute combinations while they last (16 of them).
    Rng layout(derive_seed(spec.seed, 2));
    std::vector<unsigned> combos(16);
    for (unsigned i = 0; i < 16; ++i) combos[i] = i;
    layout.shuffle(combos.begin(), combos.end());
    const double size = spec.image_size;
    for (std::size_t c = 0; c < classes; ++c) {
        const unsigned bits = combos[c % combos.size()];
        LatentPattern p;
        p.bright = bits & 1u;
        p.fine = bits & 2u;
        p.horizontal = bits & 4u;
        p.central = bits & 8u;
        p.phase = 2.0 * std::numbers::pi * layout.uniform();
        if (p.central) {
            p.blob_row = size / 2.0 - 0.5 + (layout.uniform() - 0.5) * 2.0;
            p.blob_col = size / 2.0 - 0.5 + (layout.uniform() - 0.5) * 2.0;
        } else {
            const int corner = static_cast<int>(layout.below(4));
            const double near = size * 0.2, far = size * 0.8 - 1.0;
            p.blob_row = ((corner & 1) ? far : near) + (layout.uniform() - 0.5) * 2.0;
            p.blob_col = ((corner & 2) ? far : near) + (layout.uniform() - 0.5) * 2.0;
        }
        task.patterns.push_back(p);
        task.prototypes.push_back(render_prototype(p, spec.image_size, layout));
    }

    Rng noise(derive_seed(spec.seed, 3));
    int index = 0;
    task.support.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        for (int k = 0; k < spec.k_max; ++k) {
            task.support[c].push_back(
                {draw_sample(task.prototypes[c], spec.noise_std, noise), static_cast<int>(c), index++});
        }
    }
    for (std::size_t c = 0; c < classes; ++c) {
        for (int q = 0; q < spec.queries_per_class; ++q) {
            task.query.push_back({draw_sample(task.prototypes[c], spec.noise_std, noise), static_cast<int>(c), index++});
        }
    }

    Rng phrasing(derive_seed(spec.seed, 4));
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::string> pool;
        const auto descriptors = task.patterns[c].descriptors();
        for (int t = 0; t < spec.template_pool_size; ++t) {
            std::vector<std::string> chosen = descriptors;
            phrasing.shuffle(chosen.begin(), chosen.end());
            chosen.resize(2 + phrasing.below(3));
            std::string text(kExpertFrames[phrasing.below(kExpertFrames.size())]);
            for (const auto& d : chosen) {
                text += " " + d;
            }
            pool.push_back(std::move(text));
        }
        task.expert_templates.push_back(std::move(pool));
    }

    std::tie(task.base_classes, task.novel_classes) =
        base_novel_split(spec.classes, derive_seed(spec.seed, 5), spec.base_fraction);
    return task;
}

std::pair<std::vector<int>, std::vector<int>> base_novel_split(int classes, std::uint64_t seed, double base_fraction) {
    if (classes < 2) {
        fail(ErrorCategory::invalid_argument, "base/novel split needs at least 2 classes");
    }
    if (!(base_fraction > 0.0 && base_fraction < 1.0)) {
        fail(ErrorCategory::invalid_argument, "base_fraction must lie in (0, 1)");
    }
    std::vector<int> order(static_cast<std::size_t>(classes));
    for (int i = 0; i < classes; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
    const auto base_count = static_cast<std::size_t>(std::ceil(classes * base_fraction - 1e-12));
    std::vector<int> base(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(base_count));
    std::vector<int> novel(order.begin() + static_cast<std::ptrdiff_t>(base_count), order.end());
    std::sort(base.begin(), base.end());
    std::sort(novel.begin(), novel.end());
    return {base, novel};
}

namespace {

void write_f64_le(std::ofstream& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    std::array<char, 8> bytes{};
    for (std::size_t i = 0; i < 8; ++i) {
        bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
    }
    out.write(bytes.data(), 8);
}

double read_f64_le(std::ifstream& in) {
    std::array<unsigned char, 8> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), 8);
    if (!in) {
        fail(ErrorCategory::io, "truncated image matrix");
    }
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    }
    return std::bit_cast<double>(bits);
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCategory::io, "cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::io, "malformed JSON in " + path.string() + ": " + e.what());
    }
}

} // namespace

void write_task(const FewShotTask& task, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::size_t pixels = static_cast<std::size_t>(task.spec.image_size * task.spec.image_size);
    std::vector<const LabeledImage*> all;
    for (const auto& shots : task.support) {
        for (const auto& s : shots) all.push_back(&s);
    }
    for (const auto& q : task.query) all.push_back(&q);

    std::ofstream bin(dir / "images.bin", std::ios::binary);
    if (!bin) {
        fail(ErrorCategory::io, "cannot write " + (dir / "images.bin").string());
    }
    for (const LabeledImage* img : all) {
        for (double v : img->pixels.values()) write_f64_le(bin, v);
    }

    nlohmann::json header = {{"shape", {all.size(), pixels}},
                             {"dtype", "float64"},
                             {"byte_order", "little"},
                             {"seed", task.spec.seed},
                             {"image_size", task.spec.image_size}};
    std::ofstream(dir / "images.json") << header.dump(2) << '\n';

    nlohmann::json support = nlohmann::json::array();
    for (const auto& shots : task.support) {
        for (const auto& s : shots) support.push_back({{"index", s.index}, {"label", s.label}});
    }
    nlohmann::json query = nlohmann::json::array();
    for (const auto& q : task.query) query.push_back({{"index", q.index}, {"label", q.label}});

    nlohmann::json doc = {{"format_version", 1},
                          {"spec", to_json(task.spec)},
                          {"class_names", task.class_names},
                          {"descriptors", nlohmann::json::array()},
                          {"support", support},
                          {"query", query},
                          {"expert_templates", task.expert_templates},
                          {"base_classes", task.base_classes},
                          {"novel_classes", task.novel_classes}};
    for (const auto& p : task.patterns) doc["descriptors"].push_back(p.descriptors());
    std::ofstream out(dir / "task.json");
    if (!out) {
        fail(ErrorCategory::io, "cannot write " + (dir / "task.json").string());
    }
    out << doc.dump(2) << '\n';
}

FewShotTask read_task(const std::filesystem::path& dir) {
    const auto header = read_json(dir / "images.json");
    const auto doc = read_json(dir / "task.json");
    try {
        if (header.at("dtype") != "float64" || header.at("byte_order") != "little") {
            fail(ErrorCategory::io, "unsupported image encoding in " + (dir / "images.json").string());
        }
        const auto rows = header.at("shape").at(0).get<std::size_t>();
        const auto cols = header.at("shape").at(1).get<std::size_t>();

        std::ifstream bin(dir / "images.bin", std::ios::binary);
        if (!bin) {
            fail(ErrorCategory::io, "cannot open " + (dir / "images.bin").string());
        }
        std::vector<Tensor> images;
        images.reserve(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            Tensor img = Tensor::matrix(1, cols);
            for (double& v : img.values()) v = read_f64_le(bin);
            images.push_back(std::move(img));
        }

        FewShotTask task;
        task.spec = spec_from_json(doc.at("spec"));
        // Latent patterns and prototypes are regenerated; they are not part of the file.
        const FewShotTask regenerated = generate_task(task.spec);
        task.patterns = regenerated.patterns;
        task.prototypes = regenerated.prototypes;
        task.class_names = doc.at("class_names").get<std::vector<std::string>>();
        task.support.resize(task.class_names.size());
        for (const auto& s : doc.at("support")) {
            const int idx = s.at("index").get<int>();
            const int label = s.at("label").get<int>();
            task.support.at(static_cast<std::size_t>(label)).push_back({images.at(static_cast<std::size_t>(idx)), label, idx});
        }
        for (const auto& q : doc.at("query")) {
            const int idx = q.at("index").get<int>();
            task.query.push_back({images.at(static_cast<std::size_t>(idx)), q.at("label").get<int>(), idx});
        }
        task.expert_templates = doc.at("expert_templates").get<std::vector<std::vector<std::string>>>();
        task.base_classes = doc.at("base_classes").get<std::vector<int>>();
        task.novel_classes = doc.at("novel_classes").get<std::vector<int>>();
        return task;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::io, "malformed task in " + dir.string() + ": " + e.what());
    } catch (const std::out_of_range& e) {
        fail(ErrorCategory::io, "inconsistent task in " + dir.string() + ": " + e.what());
    }
}

} // namespace anchorfuse
