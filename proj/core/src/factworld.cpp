#include "editlab/factworld.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace editlab {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;
constexpr int kMaxEvalNeighbors = 4;

const char* kSyllables[] = {"ba", "cho", "dir", "fen", "gul", "har", "iz",  "jon", "kel",
                            "lom", "mir", "nat", "oth", "pra", "que", "rin", "sol", "tev",
                            "usk", "vor", "wex", "yal", "zem", "ard", "bli", "cru"};

std::string make_word(Rng& rng, std::set<std::string>& used) {
    for (;;) {
        const int n = 2 + static_cast<int>(rng.below(2));
        std::string w;
        for (int i = 0; i < n; ++i) w += kSyllables[rng.below(std::size(kSyllables))];
        if (used.insert(w).second) return w;
    }
}

TokenSeq random_prefix(Rng& rng, const std::vector<Token>& pool, int min_len, int max_len) {
    const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(
                                  max_len - min_len + 1)));
    TokenSeq p;
    for (int i = 0; i < len; ++i) p.push_back(pool[rng.below(pool.size())]);
    return p;
}

}  // namespace

Token Vocab::add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    const Token t = static_cast<Token>(words_.size());
    words_.push_back(word);
    index_.emplace(word, t);
    return t;
}

Token Vocab::get(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw InputError("unknown token: " + word);
    return it->second;
}

const std::string& Vocab::word(Token t) const {
    if (t < 0 || t >= size()) throw InputError("token id out of range: " + std::to_string(t));
    return words_[static_cast<std::size_t>(t)];
}

TokenSeq Vocab::encode(const std::string& text) const {
    TokenSeq out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(get(w));
    return out;
}

std::string Vocab::decode(const TokenSeq& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += word(tokens[i]);
    }
    return out;
}

std::string PromptTemplate::text(const Vocab& v) const {
    std::string out = v.decode(before);
    if (!out.empty()) out += ' ';
    out += "{}";
    const std::string after_text = v.decode(after);
    if (!after_text.empty()) out += ' ' + after_text;
    return out;
}

Rendered render_prompt(const PromptTemplate& tmpl, const TokenSeq& subject,
                       const TokenSeq& prefix) {
    if (subject.empty()) throw InputError("render_prompt: empty subject");
    Rendered r;
    r.tokens = prefix;
    r.tokens.insert(r.tokens.end(), tmpl.before.begin(), tmpl.before.end());
    r.tokens.insert(r.tokens.end(), subject.begin(), subject.end());
    r.subject_end = static_cast<int>(r.tokens.size()) - 1;
    r.tokens.insert(r.tokens.end(), tmpl.after.begin(), tmpl.after.end());
    return r;
}

std::vector<int> FactWorld::neighbors_of(int fact_index) const {
    const auto& f = facts[static_cast<std::size_t>(fact_index)];
    std::vector<int> out;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        if (static_cast<int>(i) == fact_index) continue;
        if (facts[i].relation == f.relation && facts[i].object == f.object)
            out.push_back(static_cast<int>(i));
    }
    return out;
}

Rendered FactWorld::fact_prompt(int fact_index, const TokenSeq& prefix) const {
    const auto& f = facts.at(static_cast<std::size_t>(fact_index));
    return render_prompt(schemas.at(static_cast<std::size_t>(f.relation)).edit_template, f.subject,
                         prefix);
}

std::vector<Rendered> FactWorld::paraphrase_prompts(int fact_index) const {
    const auto& f = facts.at(static_cast<std::size_t>(fact_index));
    std::vector<Rendered> out;
    for (const auto& p : schemas.at(static_cast<std::size_t>(f.relation)).paraphrases)
        out.push_back(render_prompt(p, f.subject));
    return out;
}

TokenSeq FactWorld::subject_only(int fact_index) const {
    return facts.at(static_cast<std::size_t>(fact_index)).subject;
}

std::vector<std::pair<TokenSeq, Token>> FactWorld::recall_probes() const {
    std::vector<std::pair<TokenSeq, Token>> out;
    for (std::size_t i = 0; i < facts.size(); ++i)
        out.emplace_back(fact_prompt(static_cast<int>(i)).tokens, facts[i].object);
    return out;
}

FactWorld generate_world(const WorldSpec& spec) {
    if (spec.n_subjects <= 0 || spec.n_relations <= 0 || spec.pool_size <= 0 ||
        spec.n_probes <= 0)
        throw ConfigError("generate_world: counts must be positive");
    if (spec.pool_size < 3) throw ConfigError("generate_world: pool_size must be >= 3");
    if (spec.paraphrases_per_relation < 2)
        throw ConfigError("generate_world: need >= 2 paraphrase templates");
    if (spec.paraphrases_per_relation > 3)
        throw ConfigError("generate_world: at most 3 paraphrase template shapes");

    FactWorld w;
    w.spec = spec;
    Rng rng(spec.seed);
    std::set<std::string> used;

    // subjects: 1-2 fresh tokens each
    std::vector<TokenSeq> subjects;
    for (int i = 0; i < spec.n_subjects; ++i) {
        TokenSeq s;
        const int len = 1 + static_cast<int>(rng.below(2));
        for (int j = 0; j < len; ++j) s.push_back(w.vocab.add(make_word(rng, used)));
        subjects.push_back(std::move(s));
    }

    // relation schemas with distinct template word stock
    std::vector<Token> filler_pool;
    for (int r = 0; r < spec.n_relations; ++r) {
        RelationSchema sc;
        sc.id = r;
        auto tok = [&] {
            const Token t = w.vocab.add(make_word(rng, used));
            filler_pool.push_back(t);
            return t;
        };
        const Token v0 = tok(), v1 = tok(), p0 = tok(), p1 = tok(), p2 = tok(), p3 = tok(),
                    v2 = tok();
        sc.edit_template = {{}, {v0, v1}};
        sc.paraphrases.push_back({{p0}, {v0, p1}});
        sc.paraphrases.push_back({{p2, p3}, {v2}});
        if (spec.paraphrases_per_relation >= 3) sc.paraphrases.push_back({{p1}, {v2, v1}});
        for (int k = 0; k < spec.pool_size; ++k) sc.object_pool.push_back(tok());
        w.schemas.push_back(std::move(sc));
    }

    // facts: subject i gets relation i mod R; objects cycle through the pool
    // within a relation so every used object is shared by >= 2 subjects
    // whenever a relation has >= 2*pool subjects.
    std::vector<std::vector<int>> rel_subjects(static_cast<std::size_t>(spec.n_relations));
    for (int i = 0; i < spec.n_subjects; ++i)
        rel_subjects[static_cast<std::size_t>(i % spec.n_relations)].push_back(i);
    for (int r = 0; r < spec.n_relations; ++r) {
        auto& subj_ids = rel_subjects[static_cast<std::size_t>(r)];
        rng.shuffle(subj_ids);
        for (std::size_t pos = 0; pos < subj_ids.size(); ++pos) {
            FactTriple f;
            f.subject = subjects[static_cast<std::size_t>(subj_ids[pos])];
            f.relation = r;
            f.object = w.schemas[static_cast<std::size_t>(r)]
                           .object_pool[pos % static_cast<std::size_t>(spec.pool_size)];
            w.facts.push_back(std::move(f));
        }
    }

    // corpus: every fact through its edit template and all paraphrases, plus
    // a few prefixed renderings so prefixed prompts are in-distribution
    auto sentence = [&](const Rendered& r, Token obj) {
        TokenSeq s = r.tokens;
        s.push_back(obj);
        return s;
    };
    for (std::size_t i = 0; i < w.facts.size(); ++i) {
        const auto& f = w.facts[i];
        w.pretrain_corpus.push_back(sentence(w.fact_prompt(static_cast<int>(i)), f.object));
        for (const auto& p : w.paraphrase_prompts(static_cast<int>(i)))
            w.pretrain_corpus.push_back(sentence(p, f.object));
        for (int c = 0; c < spec.prefixed_corpus_copies; ++c) {
            const TokenSeq prefix = random_prefix(rng, filler_pool, 1, 3);
            w.pretrain_corpus.push_back(
                sentence(w.fact_prompt(static_cast<int>(i), prefix), f.object));
        }
    }

    // frequent tokens for prefix pools: top 50 by corpus count, ties by id
    {
        std::map<Token, std::size_t> counts;
        for (const auto& s : w.pretrain_corpus)
            for (Token t : s) ++counts[t];
        std::vector<std::pair<Token, std::size_t>> freq(counts.begin(), counts.end());
        std::stable_sort(freq.begin(), freq.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        for (std::size_t i = 0; i < freq.size() && i < 50; ++i)
            w.frequent_tokens.push_back(freq[i].first);
    }

    // probes: prefixed fact renderings never seen verbatim in training
    {
        std::set<TokenSeq> corpus_set(w.pretrain_corpus.begin(), w.pretrain_corpus.end());
        while (static_cast<int>(w.probe_utterances.size()) < spec.n_probes) {
            const int fi = static_cast<int>(rng.below(w.facts.size()));
            const TokenSeq prefix = random_prefix(rng, w.frequent_tokens, 2, 4);
            TokenSeq s = sentence(w.fact_prompt(fi, prefix), w.facts[static_cast<std::size_t>(fi)].object);
            if (corpus_set.count(s)) continue;
            corpus_set.insert(s);  // probes mutually distinct too
            w.probe_utterances.push_back(std::move(s));
        }
    }

    if (spec.max_vocab > 0 && w.vocab.size() > spec.max_vocab)
        throw ConfigError("generate_world: vocabulary " + std::to_string(w.vocab.size()) +
                          " overflows configured max " + std::to_string(spec.max_vocab));
    return w;
}

EditBatch make_edit_batch(const FactWorld& world, int m, int n_prefixes, std::uint64_t seed) {
    if (m < 1) throw InputError("make_edit_batch: m must be >= 1");
    if (n_prefixes < 1) throw InputError("make_edit_batch: need at least one prefix");

    Rng rng(seed);
    EditBatch batch;
    batch.seed = seed;
    batch.requested_m = m;

    std::vector<int> eligible;
    for (std::size_t i = 0; i < world.facts.size(); ++i) {
        if (world.neighbors_of(static_cast<int>(i)).size() >= 2)
            eligible.push_back(static_cast<int>(i));
        else
            ++batch.excluded_infeasible;
    }
    if (static_cast<int>(eligible.size()) < m) {
        batch.shortfall = m - static_cast<int>(eligible.size());
        m = static_cast<int>(eligible.size());
    }
    rng.shuffle(eligible);
    eligible.resize(static_cast<std::size_t>(m));

    int next_id = 0;
    for (int fi : eligible) {
        const auto& f = world.facts[static_cast<std::size_t>(fi)];
        const auto& pool = world.schemas[static_cast<std::size_t>(f.relation)].object_pool;
        std::vector<Token> alternatives;
        for (Token o : pool)
            if (o != f.object) alternatives.push_back(o);

        EditRequest req;
        req.id = next_id++;
        req.fact_index = fi;
        req.new_object = alternatives[rng.below(alternatives.size())];

        std::vector<int> nb = world.neighbors_of(fi);
        rng.shuffle(nb);
        req.assist_neighbor = nb.front();
        for (std::size_t i = 1; i < nb.size() && req.eval_neighbors.size() < kMaxEvalNeighbors; ++i)
            req.eval_neighbors.push_back(nb[i]);
        batch.requests.push_back(std::move(req));
    }

    for (int i = 0; i < n_prefixes; ++i)
        batch.prefix_pool.push_back(random_prefix(rng, world.frequent_tokens, 1, 5));
    return batch;
}

EditBatch filter_neighbors(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                           FilterReport* report) {
    FilterReport rep;
    EditBatch out;
    out.prefix_pool = batch.prefix_pool;
    out.seed = batch.seed;
    out.requested_m = batch.requested_m;
    out.shortfall = batch.shortfall;
    out.excluded_infeasible = batch.excluded_infeasible;

    auto knows = [&](int fact_index) {
        const auto& f = world.facts[static_cast<std::size_t>(fact_index)];
        const ArgmaxInfo a = predict_next(model, world.fact_prompt(fact_index).tokens);
        return a.unique && a.index == f.object;
    };

    for (const auto& req : batch.requests) {
        std::vector<int> survivors;
        bool assist_ok = false;
        if (req.assist_neighbor && knows(*req.assist_neighbor))
            assist_ok = true;
        else if (req.assist_neighbor)
            ++rep.neighbors_removed;
        for (int nb : req.eval_neighbors) {
            if (knows(nb))
                survivors.push_back(nb);
            else
                ++rep.neighbors_removed;
        }

        EditRequest kept = req;
        kept.eval_neighbors = survivors;
        if (!assist_ok) {
            kept.assist_neighbor.reset();
            if (!survivors.empty()) {
                // the paper picks the assist sample after filtering; promote
                // one surviving eval neighbor so the request stays usable
                kept.assist_neighbor = survivors.front();
                kept.eval_neighbors.erase(kept.eval_neighbors.begin());
                ++rep.assists_promoted;
            }
        }
        if (!kept.assist_neighbor || kept.eval_neighbors.empty()) {
            ++rep.requests_dropped;
            continue;
        }
        out.requests.push_back(std::move(kept));
    }
    if (report) *report = rep;
    return out;
}

namespace {

json template_json(const PromptTemplate& t, const Vocab& v) {
    return json{{"before", v.decode(t.before)}, {"after", v.decode(t.after)}};
}

PromptTemplate template_from_json(const json& j, const Vocab& v) {
    return PromptTemplate{v.encode(j.at("before").get<std::string>()),
                          v.encode(j.at("after").get<std::string>())};
}

}  // namespace

void save_world(const FactWorld& w, const std::string& path) {
    json j;
    j["format_version"] = kFormatVersion;
    j["spec"] = {{"seed", w.spec.seed},
                 {"n_subjects", w.spec.n_subjects},
                 {"n_relations", w.spec.n_relations},
                 {"pool_size", w.spec.pool_size},
                 {"n_probes", w.spec.n_probes},
                 {"paraphrases_per_relation", w.spec.paraphrases_per_relation},
                 {"prefixed_corpus_copies", w.spec.prefixed_corpus_copies},
                 {"max_vocab", w.spec.max_vocab}};
    j["vocab"] = w.vocab.words();
    json schemas = json::array();
    for (const auto& s : w.schemas) {
        json ps = json::array();
        for (const auto& p : s.paraphrases) ps.push_back(template_json(p, w.vocab));
        json pool = json::array();
        for (Token o : s.object_pool) pool.push_back(w.vocab.word(o));
        schemas.push_back({{"id", s.id},
                           {"edit_template", template_json(s.edit_template, w.vocab)},
                           {"paraphrases", ps},
                           {"object_pool", pool}});
    }
    j["schemas"] = schemas;
    json facts = json::array();
    for (const auto& f : w.facts)
        facts.push_back({{"subject", w.vocab.decode(f.subject)},
                         {"relation", f.relation},
                         {"object", w.vocab.word(f.object)}});
    j["facts"] = facts;
    auto seqs = [&](const std::vector<TokenSeq>& v) {
        json a = json::array();
        for (const auto& s : v) a.push_back(w.vocab.decode(s));
        return a;
    };
    j["corpus"] = seqs(w.pretrain_corpus);
    j["probe_utterances"] = seqs(w.probe_utterances);
    json freq = json::array();
    for (Token t : w.frequent_tokens) freq.push_back(w.vocab.word(t));
    j["frequent_tokens"] = freq;

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open world file for writing: " + path);
    f << j.dump(2) << '\n';
}

FactWorld load_world(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open world file: " + path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw DataError("corrupt world file: " + path);
    if (j.at("format_version").get<int>() != kFormatVersion)
        throw DataError("unsupported world format version in " + path);

    FactWorld w;
    const auto& sp = j.at("spec");
    w.spec.seed = sp.at("seed").get<std::uint64_t>();
    w.spec.n_subjects = sp.at("n_subjects").get<int>();
    w.spec.n_relations = sp.at("n_relations").get<int>();
    w.spec.pool_size = sp.at("pool_size").get<int>();
    w.spec.n_probes = sp.at("n_probes").get<int>();
    w.spec.paraphrases_per_relation = sp.at("paraphrases_per_relation").get<int>();
    w.spec.prefixed_corpus_copies = sp.at("prefixed_corpus_copies").get<int>();
    w.spec.max_vocab = sp.at("max_vocab").get<int>();

    for (const auto& word : j.at("vocab")) w.vocab.add(word.get<std::string>());
    for (const auto& s : j.at("schemas")) {
        RelationSchema sc;
        sc.id = s.at("id").get<int>();
        sc.edit_template = template_from_json(s.at("edit_template"), w.vocab);
        for (const auto& p : s.at("paraphrases"))
            sc.paraphrases.push_back(template_from_json(p, w.vocab));
        for (const auto& o : s.at("object_pool"))
            sc.object_pool.push_back(w.vocab.get(o.get<std::string>()));
        w.schemas.push_back(std::move(sc));
    }
    for (const auto& fj : j.at("facts")) {
        FactTriple t;
        t.subject = w.vocab.encode(fj.at("subject").get<std::string>());
        t.relation = fj.at("relation").get<int>();
        t.object = w.vocab.get(fj.at("object").get<std::string>());
        w.facts.push_back(std::move(t));
    }
    for (const auto& s : j.at("corpus")) w.pretrain_corpus.push_back(w.vocab.encode(s.get<std::string>()));
    for (const auto& s : j.at("probe_utterances"))
        w.probe_utterances.push_back(w.vocab.encode(s.get<std::string>()));
    for (const auto& t : j.at("frequent_tokens"))
        w.frequent_tokens.push_back(w.vocab.get(t.get<std::string>()));
    return w;
}

void save_edit_batch(const FactWorld& w, const EditBatch& batch, const std::string& jsonl_path,
                     const std::string& meta_path) {
    std::ofstream f(jsonl_path, std::ios::trunc);
    if (!f) throw IoError("cannot open dataset for writing: " + jsonl_path);
    for (const auto& req : batch.requests) {
        const auto& fact = w.facts[static_cast<std::size_t>(req.fact_index)];
        const auto& schema = w.schemas[static_cast<std::size_t>(fact.relation)];
        json rec;
        rec["format_version"] = kFormatVersion;
        rec["case_id"] = req.id;
        rec["relation"] = fact.relation;
        rec["prompt"] = w.vocab.decode(w.fact_prompt(req.fact_index).tokens);
        rec["subject"] = w.vocab.decode(fact.subject);
        rec["ground_truth"] = w.vocab.word(fact.object);
        rec["target_new"] = w.vocab.word(req.new_object);
        json nb_prompts = json::array(), nb_truth = json::array();
        for (int nb : req.eval_neighbors) {
            nb_prompts.push_back(w.vocab.decode(w.fact_prompt(nb).tokens));
            nb_truth.push_back(w.vocab.word(w.facts[static_cast<std::size_t>(nb)].object));
        }
        rec["locality"]["neighborhood"] = {{"prompt", nb_prompts}, {"ground_truth", nb_truth}};
        json samples = json::array();
        if (req.assist_neighbor) {
            samples.push_back(
                {{"subject",
                  w.vocab.decode(w.facts[static_cast<std::size_t>(*req.assist_neighbor)].subject)},
                 {"prompt", schema.edit_template.text(w.vocab)}});
        }
        rec["neighborhood_samples"] = samples;
        f << rec.dump() << '\n';
    }

    json meta;
    meta["format_version"] = kFormatVersion;
    meta["seed"] = batch.seed;
    meta["requested_m"] = batch.requested_m;
    meta["shortfall"] = batch.shortfall;
    meta["excluded_infeasible"] = batch.excluded_infeasible;
    json prefixes = json::array();
    for (const auto& p : batch.prefix_pool) prefixes.push_back(w.vocab.decode(p));
    meta["prefix_pool"] = prefixes;
    std::ofstream mf(meta_path, std::ios::trunc);
    if (!mf) throw IoError("cannot open batch meta for writing: " + meta_path);
    mf << meta.dump(2) << '\n';
}

EditBatch load_edit_batch(const FactWorld& w, const std::string& jsonl_path,
                          const std::string& meta_path) {
    auto find_fact = [&](const TokenSeq& subject, int relation) {
        for (std::size_t i = 0; i < w.facts.size(); ++i)
            if (w.facts[i].relation == relation && w.facts[i].subject == subject)
                return static_cast<int>(i);
        throw DataError("dataset references unknown fact");
    };

    EditBatch batch;
    std::ifstream f(jsonl_path);
    if (!f) throw IoError("cannot open dataset: " + jsonl_path);
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw DataError("corrupt dataset line in " + jsonl_path);
        EditRequest req;
        req.id = rec.at("case_id").get<int>();
        const int relation = rec.at("relation").get<int>();
        req.fact_index = find_fact(w.vocab.encode(rec.at("subject").get<std::string>()), relation);
        req.new_object = w.vocab.get(rec.at("target_new").get<std::string>());
        for (const auto& s : rec.at("neighborhood_samples")) {
            req.assist_neighbor =
                find_fact(w.vocab.encode(s.at("subject").get<std::string>()), relation);
            break;
        }
        const auto& nb = rec.at("locality").at("neighborhood");
        for (const auto& prompt : nb.at("prompt")) {
            const TokenSeq tokens = w.vocab.encode(prompt.get<std::string>());
            // neighbor prompts are edit-template renderings; recover the subject
            const auto& tmpl = w.schemas[static_cast<std::size_t>(relation)].edit_template;
            TokenSeq subject(tokens.begin() + static_cast<std::ptrdiff_t>(tmpl.before.size()),
                             tokens.end() - static_cast<std::ptrdiff_t>(tmpl.after.size()));
            req.eval_neighbors.push_back(find_fact(subject, relation));
        }
        batch.requests.push_back(std::move(req));
    }

    std::ifstream mf(meta_path);
    if (!mf) throw IoError("cannot open batch meta: " + meta_path);
    json meta = json::parse(mf, nullptr, false);
    if (meta.is_discarded()) throw DataError("corrupt batch meta: " + meta_path);
    batch.seed = meta.at("seed").get<std::uint64_t>();
    batch.requested_m = meta.at("requested_m").get<int>();
    batch.shortfall = meta.at("shortfall").get<int>();
    batch.excluded_infeasible = meta.at("excluded_infeasible").get<int>();
    for (const auto& p : meta.at("prefix_pool"))
        batch.prefix_pool.push_back(w.vocab.encode(p.get<std::string>()));
    return batch;
}

}  // namespace editlab
