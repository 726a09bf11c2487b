use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RoutingInstance, MAX_HYPOTHESES, MAX_UTTERANCE_LEN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    pub domain: String,
    /// Skill that serves this intent in logged traffic.
    pub skill: String,
    pub slot_keys: Vec<String>,
    /// Utterance templates; `{key}` tokens are replaced by a lexicon entry.
    pub templates: Vec<String>,
}

/// Declarative description of the label spaces and the template grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSchema {
    pub domains: Vec<String>,
    pub intents: Vec<IntentSpec>,
    pub slot_keys: Vec<String>,
    pub slot_lexicons: BTreeMap<String, Vec<String>>,
    pub device_types: Vec<String>,
    pub device_statuses: Vec<String>,
    pub skills: Vec<String>,
    /// Skills a distractor may swap in, per domain. Missing domains fall back
    /// to the skills of that domain's intents.
    #[serde(default)]
    pub domain_skills: BTreeMap<String, Vec<String>>,
    pub zipf_exponent: f64,
    /// Intent names from most to least frequent; empty means declaration order.
    #[serde(default)]
    pub frequency_rank: Vec<String>,
    /// Unnormalised device-type weights per domain; missing means uniform.
    #[serde(default)]
    pub device_type_weights: BTreeMap<String, Vec<f64>>,
    /// Unnormalised device-status weights per device type; missing means uniform.
    #[serde(default)]
    pub device_status_weights: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_max_hypotheses")]
    pub max_hypotheses: usize,
    #[serde(default = "default_max_utterance_len")]
    pub max_utterance_len: usize,
}

fn default_max_hypotheses() -> usize {
    MAX_HYPOTHESES
}

fn default_max_utterance_len() -> usize {
    MAX_UTTERANCE_LEN
}

fn placeholder(tok: &str) -> Option<&str> {
    tok.strip_prefix('{').and_then(|t| t.strip_suffix('}'))
}

fn check_unique(what: &str, labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Schema(format!("{what} label set is empty")));
    }
    let mut seen = BTreeSet::new();
    for l in labels {
        if l.is_empty() || l.contains(char::is_whitespace) {
            return Err(Error::Schema(format!("{what} label `{l}` is empty or contains whitespace")));
        }
        if !seen.insert(l) {
            return Err(Error::Schema(format!("duplicate {what} label `{l}`")));
        }
    }
    Ok(())
}

fn check_weights(what: &str, w: &[f64], n: usize) -> Result<()> {
    if w.len() != n || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Schema(format!(
            "{what}: expected {n} non-negative weights with positive sum"
        )));
    }
    Ok(())
}

impl CorpusSchema {
    pub fn validate(&self) -> Result<()> {
        check_unique("domain", &self.domains)?;
        check_unique("slot key", &self.slot_keys)?;
        check_unique("device type", &self.device_types)?;
        check_unique("device status", &self.device_statuses)?;
        check_unique("skill", &self.skills)?;
        let names: Vec<String> = self.intents.iter().map(|i| i.name.clone()).collect();
        check_unique("intent", &names)?;
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::Schema("zipf exponent must be finite and non-negative".into()));
        }
        if self.max_hypotheses == 0 || self.max_utterance_len == 0 {
            return Err(Error::Schema("max_hypotheses and max_utterance_len must be ≥ 1".into()));
        }
        for (key, lex) in &self.slot_lexicons {
            if !self.slot_keys.contains(key) {
                return Err(Error::Schema(format!("lexicon for undeclared slot key `{key}`")));
            }
            if lex.is_empty() || lex.iter().any(|v| v.split_whitespace().next().is_none()) {
                return Err(Error::Schema(format!("lexicon `{key}` is empty or has blank entries")));
            }
        }
        for intent in &self.intents {
            let ctx = |m: String| Error::Schema(format!("intent `{}`: {m}", intent.name));
            if !self.domains.contains(&intent.domain) {
                return Err(ctx(format!("unknown domain `{}`", intent.domain)));
            }
            if !self.skills.contains(&intent.skill) {
                return Err(ctx(format!("unknown skill `{}`", intent.skill)));
            }
            if intent.templates.len() < 3 {
                return Err(ctx(format!("needs at least 3 templates, has {}", intent.templates.len())));
            }
            for key in &intent.slot_keys {
                if !self.slot_keys.contains(key) {
                    return Err(ctx(format!("unknown slot key `{key}`")));
                }
            }
            for t in &intent.templates {
                let mut len = 0;
                for tok in t.split_whitespace() {
                    match placeholder(tok) {
                        Some(key) => {
                            let lex = self.slot_lexicons.get(key).ok_or_else(|| {
                                ctx(format!("placeholder `{{{key}}}` has no filler lexicon"))
                            })?;
                            if !intent.slot_keys.iter().any(|k| k == key) {
                                return Err(ctx(format!("placeholder `{{{key}}}` is not one of the intent's slot keys")));
                            }
                            len += lex.iter().map(|v| v.split_whitespace().count()).max().unwrap_or(0);
                        }
                        None => len += 1,
                    }
                }
                if len == 0 || len > self.max_utterance_len {
                    return Err(ctx(format!(
                        "template `{t}` can produce {len} tokens (limit {})",
                        self.max_utterance_len
                    )));
                }
            }
        }
        if !self.frequency_rank.is_empty() {
            let ranked: BTreeSet<&String> = self.frequency_rank.iter().collect();
            let declared: BTreeSet<&String> = names.iter().collect();
            if ranked != declared || self.frequency_rank.len() != names.len() {
                return Err(Error::Schema("frequency_rank must list every intent exactly once".into()));
            }
        }
        for (d, skills) in &self.domain_skills {
            if !self.domains.contains(d) || skills.iter().any(|s| !self.skills.contains(s)) {
                return Err(Error::Schema(format!("domain_skills entry `{d}` references unknown labels")));
            }
        }
        for (d, w) in &self.device_type_weights {
            if !self.domains.contains(d) {
                return Err(Error::Schema(format!("device_type_weights for unknown domain `{d}`")));
            }
            check_weights(&format!("device_type_weights[{d}]"), w, self.device_types.len())?;
        }
        for (t, w) in &self.device_status_weights {
            if !self.device_types.contains(t) {
                return Err(Error::Schema(format!("device_status_weights for unknown device type `{t}`")));
            }
            check_weights(&format!("device_status_weights[{t}]"), w, self.device_statuses.len())?;
        }
        Ok(())
    }

    pub fn intent(&self, name: &str) -> Option<&IntentSpec> {
        self.intents.iter().find(|i| i.name == name)
    }

    pub fn intents_in(&self, domain: &str) -> Vec<&IntentSpec> {
        self.intents.iter().filter(|i| i.domain == domain).collect()
    }

    pub fn intents_per_domain(&self) -> BTreeMap<String, Vec<String>> {
        let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for i in &self.intents {
            m.entry(i.domain.clone()).or_default().push(i.name.clone());
        }
        m
    }

    /// Intents in Zipf rank order.
    pub fn ranked_intents(&self) -> Vec<&IntentSpec> {
        if self.frequency_rank.is_empty() {
            self.intents.iter().collect()
        } else {
            self.frequency_rank
                .iter()
                .map(|n| self.intent(n).expect("validated rank"))
                .collect()
        }
    }

    pub fn skills_for_domain(&self, domain: &str) -> Vec<String> {
        if let Some(s) = self.domain_skills.get(domain) {
            return s.clone();
        }
        let mut out: Vec<String> = Vec::new();
        for i in self.intents_in(domain) {
            if !out.contains(&i.skill) {
                out.push(i.skill.clone());
            }
        }
        out
    }

    pub fn device_type_weights_for(&self, domain: &str) -> Vec<f64> {
        self.device_type_weights
            .get(domain)
            .cloned()
            .unwrap_or_else(|| vec![1.0; self.device_types.len()])
    }

    pub fn device_status_weights_for(&self, device_type: &str) -> Vec<f64> {
        self.device_status_weights
            .get(device_type)
            .cloned()
            .unwrap_or_else(|| vec![1.0; self.device_statuses.len()])
    }

    /// Hex SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: CorpusSchema = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks one instance against the label spaces and shape invariants.
    pub fn validate_instance(&self, inst: &RoutingInstance) -> std::result::Result<(), String> {
        let n = inst.hypotheses.len();
        if n == 0 || n > self.max_hypotheses {
            return Err(format!("{n} hypotheses (allowed 1..={})", self.max_hypotheses));
        }
        if inst.logged_action >= n {
            return Err(format!("logged_action {} out of range for {n} hypotheses", inst.logged_action));
        }
        let first = &inst.hypotheses[0];
        let len = first.text.split_whitespace().count();
        if len == 0 || len > self.max_utterance_len {
            return Err(format!("utterance has {len} tokens (allowed 1..={})", self.max_utterance_len));
        }
        for h in &inst.hypotheses {
            if h.text != first.text || h.device_type != first.device_type || h.device_status != first.device_status {
                return Err("hypotheses disagree on utterance-level fields".into());
            }
            if !self.device_types.contains(&h.device_type) {
                return Err(format!("unknown device_type `{}`", h.device_type));
            }
            if !self.device_statuses.contains(&h.device_status) {
                return Err(format!("unknown device_status `{}`", h.device_status));
            }
            if !self.skills.contains(&h.skill) {
                return Err(format!("unknown skill `{}`", h.skill));
            }
            match self.intent(&h.nlu.intent) {
                Some(spec) if spec.domain == h.nlu.domain => {}
                Some(_) => return Err(format!("intent `{}` is not in domain `{}`", h.nlu.intent, h.nlu.domain)),
                None => return Err(format!("unknown intent `{}`", h.nlu.intent)),
            }
            for s in &h.nlu.slots {
                if !self.slot_keys.contains(&s.key) {
                    return Err(format!("unknown slot key `{}`", s.key));
                }
            }
        }
        Ok(())
    }

    /// Procedurally built schema with four domains whose intents are
    /// verb/noun compositions sharing carrier phrases and filler lexicons.
    pub fn synthetic(opts: &SyntheticSchemaOptions) -> Result<Self> {
        if opts.intents_per_domain == 0 || opts.intents_per_domain > 100 {
            return Err(Error::Schema("intents_per_domain must be in 1..=100".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut intents = Vec::new();
        let mut domain_skills = BTreeMap::new();
        let mut skills = Vec::new();
        for d in DOMAINS {
            let mut pairs: Vec<(usize, usize)> = (0..d.verbs.len())
                .flat_map(|v| (0..d.nouns.len()).map(move |n| (v, n)))
                .collect();
            pairs.shuffle(&mut rng);
            let dskills = own(d.skills);
            skills.extend(dskills.iter().cloned());
            domain_skills.insert(d.name.to_string(), dskills.clone());
            for &(v, n) in pairs.iter().take(opts.intents_per_domain) {
                let (verb, noun) = (d.verbs[v], d.nouns[n]);
                let mut keys = own(d.slot_keys);
                keys.shuffle(&mut rng);
                keys.truncate(2);
                let mut carriers: Vec<&str> = CARRIERS.to_vec();
                carriers.shuffle(&mut rng);
                let k = rng.random_range(3..=5);
                let templates = carriers[..k]
                    .iter()
                    .map(|c| {
                        c.replace("{V}", verb)
                            .replace("{N}", noun)
                            .replace("{a}", &format!("{{{}}}", keys[0]))
                            .replace("{b}", &format!("{{{}}}", keys[1]))
                    })
                    .collect();
                intents.push(IntentSpec {
                    name: format!("{}.{verb}_{noun}", d.name),
                    domain: d.name.to_string(),
                    skill: dskills.choose(&mut rng).expect("skills").clone(),
                    slot_keys: keys,
                    templates,
                });
            }
        }
        let mut rank: Vec<String> = intents.iter().map(|i| i.name.clone()).collect();
        rank.shuffle(&mut rng);

        let device_types = own(&DEVICE_TYPES);
        let device_statuses = own(&DEVICE_STATUSES);
        let mut skewed = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    (1.2 * z).exp()
                })
                .collect()
        };
        let device_type_weights = DOMAINS
            .iter()
            .map(|d| (d.name.to_string(), skewed(device_types.len())))
            .collect();
        let device_status_weights = device_types
            .iter()
            .map(|t| (t.clone(), skewed(device_statuses.len())))
            .collect();
        let mut slot_keys = Vec::new();
        for d in DOMAINS {
            for k in d.slot_keys {
                if !slot_keys.iter().any(|s: &String| s == k) {
                    slot_keys.push(k.to_string());
                }
            }
        }
        let slot_lexicons = LEXICONS
            .iter()
            .map(|(k, v)| (k.to_string(), own(v)))
            .collect();
        let schema = CorpusSchema {
            domains: DOMAINS.iter().map(|d| d.name.to_string()).collect(),
            intents,
            slot_keys,
            slot_lexicons,
            device_types,
            device_statuses,
            skills,
            domain_skills,
            zipf_exponent: opts.zipf_exponent,
            frequency_rank: rank,
            device_type_weights,
            device_status_weights,
            max_hypotheses: MAX_HYPOTHESES,
            max_utterance_len: MAX_UTTERANCE_LEN,
        };
        schema.validate()?;
        Ok(schema)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSchemaOptions {
    pub intents_per_domain: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticSchemaOptions {
    fn default() -> Self {
        Self {
            intents_per_domain: 50,
            zipf_exponent: 1.2,
            seed: 0,
        }
    }
}

struct DomainWords {
    name: &'static str,
    verbs: &'static [&'static str],
    nouns: &'static [&'static str],
    slot_keys: &'static [&'static str],
    skills: &'static [&'static str],
}

const DOMAINS: [DomainWords; 4] = [
    DomainWords {
        name: "knowledge",
        verbs: &["define", "explain", "describe", "compare", "spell", "translate", "calculate", "summarize", "tell", "find"],
        nouns: &["meaning", "history", "population", "distance", "capital", "origin", "height", "age", "temperature", "fact"],
        slot_keys: &["topic", "city", "person", "number"],
        skills: &["knowledge_qa", "wiki_reader", "math_helper", "trivia_master", "fact_finder"],
    },
    DomainWords {
        name: "shopping",
        verbs: &["buy", "order", "reorder", "track", "cancel", "return", "compare", "find", "add", "check"],
        nouns: &["price", "deal", "package", "delivery", "cart", "coupon", "review", "receipt", "stock", "refund"],
        slot_keys: &["product", "brand", "number", "date"],
        skills: &["shop_assistant", "order_tracker", "deal_finder", "cart_manager", "price_checker"],
    },
    DomainWords {
        name: "video",
        verbs: &["play", "stream", "pause", "resume", "record", "rent", "watch", "show", "queue", "rate"],
        nouns: &["movie", "trailer", "episode", "show", "channel", "clip", "series", "documentary", "highlights", "cartoon"],
        slot_keys: &["title", "person", "genre", "date"],
        skills: &["video_player", "tv_guide", "movie_rental", "stream_hub", "clip_finder"],
    },
    DomainWords {
        name: "books",
        verbs: &["read", "open", "borrow", "purchase", "recommend", "continue", "locate", "download", "narrate", "bookmark"],
        nouns: &["book", "novel", "chapter", "audiobook", "poem", "magazine", "story", "biography", "saga", "summary"],
        slot_keys: &["title", "person", "genre", "topic"],
        skills: &["book_reader", "audiobook_player", "library_helper", "story_teller", "reading_list"],
    },
];

const CARRIERS: [&str; 14] = [
    "{V} the {N} of {a}",
    "{V} the {N} for {a}",
    "can you {V} the {N} of {a}",
    "please {V} {a} {N}",
    "i want to {V} the {N} about {a}",
    "{V} {N} {a}",
    "could you {V} a {N} for {a} {b}",
    "{V} {a} {N} {b}",
    "hey {V} the {N} with {a}",
    "what {N} can you {V} for {a}",
    "{V} me the {N} of {a} please",
    "i need to {V} the {N} {b}",
    "{V} the {b} {N} about {a}",
    "would you {V} my {N} from {b}",
];

const DEVICE_TYPES: [&str; 8] = [
    "speaker", "speaker_mini", "screen_hub", "tv_stick", "phone_app", "tablet", "car_kit", "watch",
];

const DEVICE_STATUSES: [&str; 4] = ["idle", "playing_audio", "playing_video", "screen_on"];

const LEXICONS: [(&str, &[&str]); 9] = [
    ("topic", &[
        "gravity", "photosynthesis", "volcanoes", "the moon", "black holes", "dinosaurs", "the ocean",
        "jazz", "chess", "the internet", "electricity", "the roman empire", "climate change", "honey bees",
        "the pyramids", "quantum physics", "rainbows", "earthquakes", "the stock market", "vaccines",
        "ancient greece", "the solar system", "coffee", "tornadoes", "the human heart", "glaciers",
        "democracy", "robots", "the silk road", "penguins",
    ]),
    ("city", &[
        "paris", "london", "tokyo", "new york", "berlin", "madrid", "rome", "seattle", "chicago", "boston",
        "toronto", "sydney", "mumbai", "cairo", "lima", "oslo", "dublin", "vienna", "prague", "austin",
        "denver", "miami", "nairobi", "seoul", "bangkok", "lisbon", "athens", "houston", "phoenix", "zurich",
    ]),
    ("person", &[
        "ada lovelace", "albert einstein", "marie curie", "frida kahlo", "isaac newton", "jane austen",
        "nikola tesla", "leonardo da vinci", "maya angelou", "charles darwin", "mark twain", "amelia earhart",
        "galileo", "cleopatra", "mozart", "shakespeare", "rosalind franklin", "alan turing", "harriet tubman",
        "confucius", "grace hopper", "pablo picasso", "toni morrison", "carl sagan", "ella fitzgerald",
        "bruce lee", "serena williams", "nelson mandela", "agatha christie", "steve jobs",
    ]),
    ("number", &[
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
        "fifteen", "twenty", "thirty", "forty", "fifty", "hundred", "a dozen", "a few",
    ]),
    ("product", &[
        "paper towels", "batteries", "dog food", "headphones", "a blender", "running shoes", "coffee beans",
        "a phone charger", "shampoo", "light bulbs", "a yoga mat", "printer ink", "toothpaste", "a backpack",
        "socks", "a desk lamp", "olive oil", "a water bottle", "diapers", "a keyboard", "sunscreen",
        "trash bags", "green tea", "a frying pan", "an umbrella", "vitamins", "a notebook", "dish soap",
        "a phone case", "cat litter",
    ]),
    ("brand", &[
        "acme", "zenith", "northwind", "bluepeak", "solara", "everlast", "kindred", "pinewood", "aurora",
        "vertex", "lumen", "cobalt", "harbor", "nimbus", "sterling", "maple", "orion", "tundra", "willow", "quartz",
    ]),
    ("date", &[
        "today", "tomorrow", "tonight", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday",
        "sunday", "this weekend", "next week", "last week", "this morning", "yesterday", "next month",
    ]),
    ("title", &[
        "the lost city", "dark river", "blue horizon", "the last summer", "silent storm", "the glass house",
        "midnight train", "golden hour", "the iron crown", "echoes of tomorrow", "the secret garden",
        "red canyon", "the long road", "winter light", "the hidden door", "broken arrow", "the quiet sea",
        "northern lights", "the paper moon", "city of stars", "the wild coast", "falling sky", "the old mill",
        "shadow play", "the crimson key", "bright meadow", "the far shore", "storm chasers", "this spy",
        "the clockmaker",
    ]),
    ("genre", &[
        "comedy", "drama", "horror", "mystery", "romance", "thriller", "fantasy", "science fiction",
        "western", "animation", "adventure", "crime", "history", "poetry", "biography",
    ]),
];
