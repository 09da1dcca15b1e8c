#include "dialogkit/synth.hpp"

#include <set>
#include <stdexcept>

#include "dialogkit/rng.hpp"

namespace dialogkit::synth {

namespace {

using Bank = std::vector<std::string_view>;

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

std::string cap(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

// Fills "{}" placeholders left to right.
std::string fill(std::string_view tmpl, std::initializer_list<std::string_view> args) {
  std::string out;
  auto it = args.begin();
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
      if (it == args.end()) throw std::logic_error("fill: too few arguments");
      out += *it++;
      ++i;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

const Bank kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v",
                      "z", "br", "dr", "gr", "kr", "st", "tr", "sh", "th", "vel", "mar"};
const Bank kVowels = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "io"};
const Bank kCodas = {"n", "r", "l", "s", "th", "nd", "rk", "m", "x", "", "", ""};

std::string make_name(Rng& rng, std::size_t syllables) {
  std::string s;
  for (std::size_t i = 0; i < syllables; ++i) {
    s += pick(rng, kOnsets);
    s += pick(rng, kVowels);
    if (i + 1 == syllables || rng.bernoulli(0.3)) s += pick(rng, kCodas);
  }
  return cap(s);
}

const Bank kRegions = {"the northern valleys", "the eastern coast", "the high plateau",
                       "the southern marshes", "the western hills", "the central plains",
                       "the river delta", "the island chain", "the pine forests",
                       "the desert border"};
const Bank kColors = {"red", "blue", "green", "golden", "silver", "grey", "white", "black",
                      "amber", "violet"};
const Bank kMaterials = {"oak", "copper", "clay", "glass", "bamboo", "brass", "stone",
                         "willow", "iron", "bone"};
const Bank kFoods = {"bread", "soup", "cheese", "honey", "rice", "apples", "fish",
                     "noodles", "beans", "pastries"};
const Bank kAnimals = {"herons", "otters", "deer", "foxes", "owls", "beavers", "hawks",
                       "wolves", "trout", "geese"};

struct Kind {
  std::string_view label;
  std::string_view suffix;
  std::vector<std::string_view> templates;  // {} = name, then attribute slots
};

// Slots after the name: region, year, number, color, material, food, animal.
const std::vector<Kind> kKinds = {
    {"river", " River",
     {"{} is a river in {}.", "It was first mapped in {}.", "The river is about {} kilometres long.",
      "Its water looks {} in the late afternoon.", "Old bridges of {} still cross it.",
      "Villages along the banks are known for {}.", "Many {} live near its mouth."}},
    {"town", "",
     {"{} is a small town in {}.", "The town was founded in {}.",
      "About {} hundred people live there.", "Its roofs are painted {}.",
      "The old market hall is built of {}.", "The town holds a yearly fair for {}.",
      "Children there learn to watch {} in the spring."}},
    {"breed", " hound",
     {"The {} is a dog breed from {}.", "The breed was first recorded in {}.",
      "An adult weighs about {} kilograms.", "Its coat is usually {}.",
      "Breeders once kept them in kennels of {}.", "Owners often reward them with {}.",
      "They were bred to chase {}."}},
    {"instrument", " pipe",
     {"The {} is a wind instrument played in {}.", "It first appears in songs from {}.",
      "A standard one has {} finger holes.", "Players often decorate it with {} ribbons.",
      "Makers carve the body from {}.", "Musicians play it at harvest feasts with {}.",
      "Its low notes are said to call {}."}},
    {"dish", " stew",
     {"{} is a dish from {}.", "Cooks have written about it since {}.",
      "A family pot serves about {} people.", "The finished stew has a {} colour.",
      "It is cooked slowly in a pot of {}.", "It is usually eaten with {}.",
      "Hunters once made it with {}."}},
    {"festival", " festival",
     {"The {} is held every summer in {}.", "It was first celebrated in {}.",
      "The celebration lasts {} days.", "Dancers wear {} masks.",
      "The main stage is made of {}.", "Stalls sell fresh {}.",
      "Parades feature puppets shaped like {}."}},
    {"mountain", " peak",
     {"{} is a mountain in {}.", "Climbers first reached the top in {}.",
      "The summit rises about {} hundred metres.", "At dawn the snow looks {}.",
      "Shepherds built huts of {} on its slopes.", "Hikers carry {} for the long climb.",
      "Its forests shelter {}."}},
    {"inventor", "",
     {"{} was an inventor from {}.", "{} was born in {}.",  // second line uses name twice
      "{} built {} working machines.", "{} favoured {} ink for every drawing.",
      "{} is best known for a clock made of {}.", "{} lived on {} and tea while working.",
      "{} studied the flight of {}."}},
};

}  // namespace

std::string Article::text() const {
  std::string out = title + "\n";
  for (const auto& s : sentences) out += s + "\n";
  return out;
}

std::vector<Article> wiki_articles(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Article> out;
  std::set<std::string> titles;
  while (out.size() < count) {
    const auto& kind = kKinds[out.size() % kKinds.size()];
    std::string name = make_name(rng, 2 + rng.below(2));
    if (kind.label == "inventor") name += " " + make_name(rng, 2);
    const std::string title = name + std::string(kind.suffix);
    if (!titles.insert(title).second) continue;
    const std::string year = std::to_string(1200 + rng.below(800));
    const std::string number = std::to_string(3 + rng.below(90));
    const std::string region(pick(rng, kRegions)), color(pick(rng, kColors)),
        material(pick(rng, kMaterials)), food(pick(rng, kFoods)), animal(pick(rng, kAnimals));
    Article a;
    a.title = title;
    const bool person = kind.label == "inventor";
    const auto& t = kind.templates;
    a.sentences.push_back(fill(t[0], {title, region}));
    a.sentences.push_back(person ? fill(t[1], {title, year}) : fill(t[1], {year}));
    a.sentences.push_back(person ? fill(t[2], {title, number}) : fill(t[2], {number}));
    a.sentences.push_back(person ? fill(t[3], {title, color}) : fill(t[3], {color}));
    a.sentences.push_back(person ? fill(t[4], {title, material}) : fill(t[4], {material}));
    a.sentences.push_back(person ? fill(t[5], {title, food}) : fill(t[5], {food}));
    a.sentences.push_back(person ? fill(t[6], {title, animal}) : fill(t[6], {animal}));
    // Varying article length.
    const std::size_t keep = 4 + rng.below(4);
    a.sentences.resize(keep);
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

const Bank kHobbies = {"hiking", "painting", "baking", "fishing", "gardening", "chess",
                       "knitting", "cycling", "reading mysteries", "bird watching",
                       "camping", "swimming", "woodworking", "singing in a choir",
                       "photography", "running"};
const Bank kJobs = {"nurse", "teacher", "baker", "mechanic", "librarian", "farmer",
                    "carpenter", "pilot", "chef", "dentist", "bus driver", "gardener",
                    "student", "accountant"};
const Bank kPets = {"dog", "cat", "parrot", "rabbit", "turtle", "hamster", "goldfish",
                    "horse"};
const Bank kPetNames = {"max", "luna", "biscuit", "pepper", "sunny", "rocky", "daisy",
                        "milo", "olive", "ziggy"};
const Bank kPlaces = {"a small village", "a big city", "the mountains", "a farm",
                      "a beach town", "an apartment downtown", "the suburbs"};
const Bank kMusic = {"jazz", "country music", "rock", "classical music", "folk songs",
                     "pop music"};

std::string persona_line(Rng& rng, int kind) {
  switch (kind) {
    case 0: return "i love " + std::string(pick(rng, kHobbies)) + ".";
    case 1: return "i work as a " + std::string(pick(rng, kJobs)) + ".";
    case 2:
      return "i have a " + std::string(pick(rng, kPets)) + " named " +
             std::string(pick(rng, kPetNames)) + ".";
    case 3: return "my favorite food is " + std::string(pick(rng, kFoods)) + ".";
    case 4: return "i live in " + std::string(pick(rng, kPlaces)) + ".";
    default: return "i listen to " + std::string(pick(rng, kMusic)) + " all day.";
  }
}

}  // namespace

std::vector<std::vector<std::string>> personas(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::string>> out;
  std::set<std::vector<std::string>> seen;
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > count * 100) throw std::runtime_error("personas: pool exhausted");
    const int k1 = static_cast<int>(rng.below(6));
    int k2 = static_cast<int>(rng.below(5));
    if (k2 >= k1) ++k2;
    std::vector<std::string> p{persona_line(rng, k1), persona_line(rng, k2)};
    if (seen.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Drops the trailing period of a persona line.
std::string bare(const std::string& line) {
  return !line.empty() && line.back() == '.' ? line.substr(0, line.size() - 1) : line;
}

const Bank kOpeners = {"hi ! how are you today ?", "hello , how is your day going ?",
                       "hey there ! what are you up to ?", "hi ! nice to meet you ."};
const Bank kReplies = {"i am doing well , thanks for asking .", "pretty good , just relaxing .",
                       "not bad at all , a little tired .", "great , thank you !"};
const Bank kAsks = {"what do you do for fun ?", "tell me something about yourself .",
                    "what keeps you busy these days ?", "so what is new with you ?"};
const Bank kReacts = {"that sounds lovely .", "oh wow , that is really cool .",
                      "i would like to try that some day .", "that is so interesting !",
                      "nice , i can relate to that ."};

}  // namespace

std::vector<corpus::DialogueEpisode> persona_chats(
    const std::vector<std::vector<std::string>>& persona_pool,
    const std::vector<Article>& articles, std::size_t count, std::uint64_t seed) {
  if (persona_pool.size() < 2 || articles.empty()) {
    throw std::invalid_argument("persona_chats: need personas and articles");
  }
  Rng rng(seed);
  std::vector<corpus::DialogueEpisode> out;
  for (std::size_t e = 0; e < count; ++e) {
    corpus::DialogueEpisode ep;
    ep.source_tag = "synthetic_bst";
    ep.persona_a = pick(rng, persona_pool);
    do {
      ep.persona_b = pick(rng, persona_pool);
    } while (ep.persona_b == ep.persona_a);
    const Article* art = nullptr;
    if (rng.below(3) == 0) {
      art = &pick(rng, articles);
      ep.topic = art->title;
    }
    std::vector<std::string> lines;
    std::vector<std::optional<std::string>> knowledge;
    auto say = [&](std::string text, std::optional<std::string> k = std::nullopt) {
      lines.push_back(std::move(text));
      knowledge.push_back(std::move(k));
    };
    say(std::string(pick(rng, kOpeners)));
    say(std::string(pick(rng, kReplies)) + " " + std::string(pick(rng, kAsks)));
    const std::size_t rounds = 2 + rng.below(3);
    std::size_t used_sentences = 0;
    for (std::size_t r = 0; r < rounds; ++r) {
      const auto& who = lines.size() % 2 == 0 ? ep.persona_a : ep.persona_b;
      const auto& other = lines.size() % 2 == 0 ? ep.persona_b : ep.persona_a;
      say(bare(pick(rng, who)) + " . " + std::string(pick(rng, kAsks)));
      if (art && used_sentences < art->sentences.size() && rng.bernoulli(0.6)) {
        // The asking turn names the topic; the answer carries the knowledge.
        say(bare(pick(rng, other)) + " . what do you know about " + art->title + " ?");
        const std::string& fact = art->sentences[used_sentences++];
        say("well , " + fact + " " + std::string(pick(rng, kReacts)), fact);
      } else {
        say(std::string(pick(rng, kReacts)) + " " + bare(pick(rng, other)) + " .");
      }
    }
    for (std::size_t t = 0; t < lines.size(); ++t) {
      ep.turns.push_back({t % 2 == 0 ? corpus::Speaker::kA : corpus::Speaker::kB, lines[t],
                          knowledge[t]});
    }
    out.push_back(std::move(ep));
  }
  return out;
}

namespace {

const Bank kChainAdj = {"quiet", "bright", "lazy", "clever", "tiny", "brave", "sleepy",
                        "happy", "old", "young", "noisy", "gentle"};
const Bank kChainNoun = {"fox", "baker", "sailor", "kitten", "robot", "farmer", "poet",
                         "dragon", "teacher", "pilot", "gardener", "wizard"};
const Bank kChainVerb = {"paints", "watches", "carries", "builds", "finds", "cleans",
                         "follows", "sells", "draws", "fixes"};
const Bank kChainObj = {"a red kite", "the blue door", "seven apples", "a paper boat",
                        "the old bridge", "a silver bell", "two green hats", "the wooden fence",
                        "a broken clock", "the tall tower"};
const Bank kChainWhen = {"every morning", "at night", "in the rain", "after lunch",
                         "on sundays", "before dinner", "in the garden", "by the river"};

}  // namespace

std::vector<std::string> memorizable_chain(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> out;
  std::set<std::string> seen;
  while (out.size() < n) {
    std::string s = "the " + std::string(pick(rng, kChainAdj)) + " " +
                    std::string(pick(rng, kChainNoun)) + " " +
                    std::string(pick(rng, kChainVerb)) + " " +
                    std::string(pick(rng, kChainObj)) + " " +
                    std::string(pick(rng, kChainWhen)) + " .";
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

std::vector<corpus::DialogueEpisode> chain_episodes(const std::vector<std::string>& chain,
                                                    std::size_t count, std::size_t min_turns,
                                                    std::size_t max_turns, std::uint64_t seed,
                                                    const std::string& source_tag) {
  if (chain.empty() || min_turns == 0 || max_turns < min_turns) {
    throw std::invalid_argument("chain_episodes: bad arguments");
  }
  Rng rng(seed);
  std::vector<corpus::DialogueEpisode> out;
  for (std::size_t e = 0; e < count; ++e) {
    corpus::DialogueEpisode ep;
    ep.source_tag = source_tag;
    const std::size_t start = rng.below(chain.size());
    const std::size_t turns = min_turns + rng.below(max_turns - min_turns + 1);
    for (std::size_t t = 0; t < turns; ++t) {
      ep.turns.push_back({t % 2 == 0 ? corpus::Speaker::kA : corpus::Speaker::kB,
                          chain[(start + t) % chain.size()], std::nullopt});
    }
    out.push_back(std::move(ep));
  }
  return out;
}

namespace {

const std::vector<std::pair<std::string_view, std::string_view>> kQuestionAnswers = {
    {"what did you do this weekend ?", "i went hiking with my sister near the lake"},
    {"how was work today ?", "work was busy but my team finished the big report"},
    {"what are you cooking tonight ?", "i am making vegetable soup with fresh bread"},
    {"did you watch the game ?", "yes and our team won in the very last minute"},
    {"where did you go on holiday ?", "we spent a week on a quiet island in the south"},
    {"what book are you reading ?", "i am reading a mystery about a stolen painting"},
    {"how is your garden doing ?", "the tomatoes are finally turning red this week"},
    {"what music do you like ?", "i mostly listen to old jazz records at home"},
    {"how is your new puppy ?", "he chews everything but he is very sweet"},
    {"what did you have for lunch ?", "i had a big salad and some lemon cake"},
    {"how was the concert ?", "the band played for three hours and it was amazing"},
    {"are you learning anything new ?", "i started taking piano lessons last month"},
    {"how is the new apartment ?", "it is small but it gets lots of morning sun"},
    {"what is your favorite season ?", "i love autumn because of the cool evenings"},
    {"did you go running today ?", "yes i ran five miles along the river path"},
    {"what games do you play ?", "i play chess online with my cousin most nights"},
    {"how was your trip to the city ?", "the museums were great but the trains were slow"},
    {"what are your plans for tomorrow ?", "i am going to visit my grandmother in the morning"},
    {"how did the exam go ?", "it was hard but i think i passed the math part"},
    {"what movie did you see ?", "we saw a funny film about a lost robot"},
};

// The injected closing is the longest, so answers that use it are never
// shorter than the rest.
constexpr std::string_view kInjectedClosing = "do you have plans ?";
const Bank kOtherClosings = {"and you ?", "what about you ?", "how about you ?",
                             "your turn ."};

}  // namespace

std::vector<corpus::DialogueEpisode> injected_ngram_episodes(std::size_t count,
                                                             double injected_share,
                                                             std::uint64_t seed) {
  if (!(injected_share >= 0.0 && injected_share <= 1.0)) {
    throw std::invalid_argument("injected_share must be in [0, 1]");
  }
  Rng rng(seed);
  std::vector<corpus::DialogueEpisode> out;
  for (std::size_t e = 0; e < count; ++e) {
    const auto& [q, a] = kQuestionAnswers[e % kQuestionAnswers.size()];
    std::string closing = rng.bernoulli(injected_share) ? std::string(kInjectedClosing)
                                                        : std::string(pick(rng, kOtherClosings));
    corpus::DialogueEpisode ep;
    ep.source_tag = "synthetic_ngram";
    ep.turns.push_back({corpus::Speaker::kA, std::string(q), std::nullopt});
    ep.turns.push_back({corpus::Speaker::kB, std::string(a) + " . " + closing, std::nullopt});
    out.push_back(std::move(ep));
  }
  return out;
}

const std::vector<std::string>& placeholder_unsafe_words() {
  static const std::vector<std::string> words = {"grumblex", "snarkbit", "vexnoodle",
                                                 "blorfwit", "drabquat", "skunkmop"};
  return words;
}

namespace {

const Bank kSafetyContexts = {"what do you think of my idea ?", "how was your day ?",
                              "do you like my new haircut ?", "can you help me with this ?",
                              "what did you think of the movie ?", "tell me about yourself ."};
const Bank kUnsafeTemplates = {"you are such a {} , go away .", "what a {} thing to say .",
                               "only a total {} would ask that .", "stop talking , you {} .",
                               "nobody likes you , {} ."};
const Bank kBenignResponses = {"that sounds like a great idea .", "my day was calm and nice .",
                               "i think it looks really good on you .",
                               "sure , i am happy to help .", "the ending surprised me a lot .",
                               "i enjoy reading and long walks .",
                               "thanks for asking , i am fine .", "let us talk about music ."};

}  // namespace

std::vector<SafetyExample> safety_examples(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SafetyExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    SafetyExample ex;
    ex.context = std::string(pick(rng, kSafetyContexts));
    ex.unsafe = i % 2 == 1;
    ex.response = ex.unsafe ? fill(pick(rng, kUnsafeTemplates),
                                   {pick(rng, placeholder_unsafe_words())})
                            : std::string(pick(rng, kBenignResponses));
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace dialogkit::synth
