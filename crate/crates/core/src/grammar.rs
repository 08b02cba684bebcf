//! A small closed-vocabulary English-like language.
//!
//! Every word is one token id below [`MASK_TOKEN`]. Clauses carry enough
//! structure (number agreement, negation, transitivity, noun categories,
//! pronouns) for both stimulus stories and linguistic probe tasks.

use rand::seq::IndexedRandom;
use rand::Rng;

pub type Token = usize;

/// Reserved id used to hide positions under the masked objective.
pub const MASK_TOKEN: Token = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NounCategory {
    Animal,
    Person,
    Thing,
}

struct NounEntry {
    singular: &'static str,
    plural: &'static str,
    category: NounCategory,
}

struct VerbEntry {
    third_singular: &'static str,
    base: &'static str,
    transitive: bool,
}

const NOUNS: &[NounEntry] = &[
    NounEntry { singular: "dog", plural: "dogs", category: NounCategory::Animal },
    NounEntry { singular: "cat", plural: "cats", category: NounCategory::Animal },
    NounEntry { singular: "bird", plural: "birds", category: NounCategory::Animal },
    NounEntry { singular: "horse", plural: "horses", category: NounCategory::Animal },
    NounEntry { singular: "fox", plural: "foxes", category: NounCategory::Animal },
    NounEntry { singular: "wolf", plural: "wolves", category: NounCategory::Animal },
    NounEntry { singular: "child", plural: "children", category: NounCategory::Person },
    NounEntry { singular: "teacher", plural: "teachers", category: NounCategory::Person },
    NounEntry { singular: "farmer", plural: "farmers", category: NounCategory::Person },
    NounEntry { singular: "king", plural: "kings", category: NounCategory::Person },
    NounEntry { singular: "girl", plural: "girls", category: NounCategory::Person },
    NounEntry { singular: "boy", plural: "boys", category: NounCategory::Person },
    NounEntry { singular: "doctor", plural: "doctors", category: NounCategory::Person },
    NounEntry { singular: "book", plural: "books", category: NounCategory::Thing },
    NounEntry { singular: "stone", plural: "stones", category: NounCategory::Thing },
    NounEntry { singular: "cup", plural: "cups", category: NounCategory::Thing },
    NounEntry { singular: "box", plural: "boxes", category: NounCategory::Thing },
    NounEntry { singular: "tree", plural: "trees", category: NounCategory::Thing },
    NounEntry { singular: "house", plural: "houses", category: NounCategory::Thing },
];

const VERBS: &[VerbEntry] = &[
    VerbEntry { third_singular: "runs", base: "run", transitive: false },
    VerbEntry { third_singular: "sleeps", base: "sleep", transitive: false },
    VerbEntry { third_singular: "sings", base: "sing", transitive: false },
    VerbEntry { third_singular: "waits", base: "wait", transitive: false },
    VerbEntry { third_singular: "smiles", base: "smile", transitive: false },
    VerbEntry { third_singular: "falls", base: "fall", transitive: false },
    VerbEntry { third_singular: "sees", base: "see", transitive: true },
    VerbEntry { third_singular: "likes", base: "like", transitive: true },
    VerbEntry { third_singular: "finds", base: "find", transitive: true },
    VerbEntry { third_singular: "helps", base: "help", transitive: true },
    VerbEntry { third_singular: "follows", base: "follow", transitive: true },
    VerbEntry { third_singular: "carries", base: "carry", transitive: true },
    VerbEntry { third_singular: "watches", base: "watch", transitive: true },
    VerbEntry { third_singular: "takes", base: "take", transitive: true },
];

/// Verbs an inanimate subject can take.
const THING_VERBS: &[usize] = &[5, 3];

pub const COLOR_ADJECTIVES: &[&str] = &["red", "green", "blue", "white"];
const OTHER_ADJECTIVES: &[&str] = &["big", "small", "tall", "old", "young", "happy", "sad", "quiet"];
const ADVERBS: &[&str] = &["quickly", "slowly", "often", "again"];
const PREPOSITIONS: &[&str] = &["near", "with", "under", "behind"];
const CONNECTIVES: &[&str] = &["and", "but", "then", "so", "later", "because"];

/// Determiners by the number they license; `the` and `some` go with both.
const SINGULAR_DETERMINERS: &[&str] = &["a", "this", "that", "every"];
const PLURAL_DETERMINERS: &[&str] = &["these", "those", "many"];
const SHARED_DETERMINERS: &[&str] = &["the", "the", "some"];

const FUNCTION_WORDS: &[&str] = &[
    "does", "do", "not", "never", "he", "she", "it", "they", "him", "her", "them", ".", ",",
];

/// Word list with stable ids.
pub struct Lexicon {
    words: Vec<&'static str>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new()
    }
}

impl Lexicon {
    pub fn new() -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        let mut add = |w: &'static str| {
            if !words.contains(&w) {
                words.push(w);
            }
        };
        for n in NOUNS {
            add(n.singular);
            add(n.plural);
        }
        for v in VERBS {
            add(v.third_singular);
            add(v.base);
        }
        COLOR_ADJECTIVES
            .iter()
            .chain(OTHER_ADJECTIVES)
            .chain(ADVERBS)
            .chain(PREPOSITIONS)
            .chain(CONNECTIVES)
            .chain(SINGULAR_DETERMINERS)
            .chain(PLURAL_DETERMINERS)
            .chain(SHARED_DETERMINERS)
            .chain(FUNCTION_WORDS)
            .for_each(|w| add(w));
        debug_assert!(words.len() < MASK_TOKEN);
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Token {
        self.words
            .iter()
            .position(|w| *w == word)
            .unwrap_or_else(|| panic!("word {word:?} not in lexicon"))
    }

    pub fn word(&self, id: Token) -> &'static str {
        if id == MASK_TOKEN {
            return "[MASK]";
        }
        self.words.get(id).copied().unwrap_or("[UNK]")
    }

    pub fn decode(&self, ids: &[Token]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NounPhrase {
    pub determiner: &'static str,
    pub adjectives: Vec<&'static str>,
    pub noun: usize,
    pub plural: bool,
}

impl NounPhrase {
    pub fn category(&self) -> NounCategory {
        NOUNS[self.noun].category
    }

    pub fn noun_word(&self) -> &'static str {
        if self.plural {
            NOUNS[self.noun].plural
        } else {
            NOUNS[self.noun].singular
        }
    }

    pub fn pronoun(&self, object: bool) -> &'static str {
        match (self.plural, self.category(), object) {
            (true, _, false) => "they",
            (true, _, true) => "them",
            (false, NounCategory::Person, false) => "she",
            (false, NounCategory::Person, true) => "her",
            (false, _, _) => "it",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negation {
    None,
    /// "does not" / "do not" + base verb.
    Auxiliary,
    /// "never" + agreeing verb.
    Never,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clause {
    pub subject: NounPhrase,
    /// Render the subject as a pronoun.
    pub pronoun_subject: bool,
    pub verb: usize,
    pub negation: Negation,
    pub object: Option<NounPhrase>,
    pub adverb: Option<&'static str>,
    pub prepositional: Option<(&'static str, NounPhrase)>,
}

impl Clause {
    pub fn is_negated(&self) -> bool {
        self.negation != Negation::None
    }

    pub fn verb_is_transitive(&self) -> bool {
        VERBS[self.verb].transitive
    }

    /// Words of the clause. `agreement_violation` swaps the number marking of
    /// the finite verb (or auxiliary).
    pub fn words(&self, agreement_violation: bool) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.pronoun_subject {
            out.push(self.subject.pronoun(false));
        } else {
            push_noun_phrase(&mut out, &self.subject);
        }
        let singular = !self.subject.plural ^ agreement_violation;
        let verb = &VERBS[self.verb];
        match self.negation {
            Negation::None => out.push(if singular { verb.third_singular } else { verb.base }),
            Negation::Auxiliary => {
                out.push(if singular { "does" } else { "do" });
                out.push("not");
                out.push(verb.base);
            }
            Negation::Never => {
                out.push("never");
                out.push(if singular { verb.third_singular } else { verb.base });
            }
        }
        if let Some(obj) = &self.object {
            push_noun_phrase(&mut out, obj);
        }
        if let Some(adv) = self.adverb {
            out.push(adv);
        }
        if let Some((prep, np)) = &self.prepositional {
            out.push(prep);
            push_noun_phrase(&mut out, np);
        }
        out
    }
}

fn push_noun_phrase(out: &mut Vec<&'static str>, np: &NounPhrase) {
    out.push(np.determiner);
    out.extend(np.adjectives.iter().copied());
    out.push(np.noun_word());
}

/// Knobs for random clause generation.
#[derive(Clone, Copy, Debug)]
pub struct ClauseStyle {
    pub negation_rate: f64,
    pub adjective_rate: f64,
    pub adverb_rate: f64,
    pub prepositional_rate: f64,
}

impl Default for ClauseStyle {
    fn default() -> Self {
        Self {
            negation_rate: 0.25,
            adjective_rate: 0.35,
            adverb_rate: 0.2,
            prepositional_rate: 0.25,
        }
    }
}

pub fn determiner_for<R: Rng>(rng: &mut R, plural: bool) -> &'static str {
    let pool: Vec<&'static str> = if plural {
        PLURAL_DETERMINERS.iter().chain(SHARED_DETERMINERS).copied().collect()
    } else {
        SINGULAR_DETERMINERS.iter().chain(SHARED_DETERMINERS).copied().collect()
    };
    pool.choose(rng).copied().unwrap()
}

/// A determiner that licenses only the opposite number.
pub fn mismatched_determiner<R: Rng>(rng: &mut R, plural: bool) -> &'static str {
    let pool = if plural { SINGULAR_DETERMINERS } else { PLURAL_DETERMINERS };
    pool.choose(rng).copied().unwrap()
}

pub fn random_adjective<R: Rng>(rng: &mut R, allow_color: bool) -> &'static str {
    if allow_color && rng.random_bool(0.35) {
        COLOR_ADJECTIVES.choose(rng).copied().unwrap()
    } else {
        OTHER_ADJECTIVES.choose(rng).copied().unwrap()
    }
}

pub fn nouns_in(category: NounCategory) -> Vec<usize> {
    (0..NOUNS.len()).filter(|&i| NOUNS[i].category == category).collect()
}

pub fn noun_count() -> usize {
    NOUNS.len()
}

pub fn transitive_verbs() -> Vec<usize> {
    (0..VERBS.len()).filter(|&i| VERBS[i].transitive).collect()
}

pub fn intransitive_verbs() -> Vec<usize> {
    (0..VERBS.len()).filter(|&i| !VERBS[i].transitive).collect()
}

pub fn random_noun_phrase<R: Rng>(rng: &mut R, noun: usize, style: &ClauseStyle, allow_color: bool) -> NounPhrase {
    let plural = rng.random_bool(0.5);
    let adjectives = if rng.random_bool(style.adjective_rate) {
        vec![random_adjective(rng, allow_color)]
    } else {
        Vec::new()
    };
    NounPhrase {
        determiner: determiner_for(rng, plural),
        adjectives,
        noun,
        plural,
    }
}

/// Picks a verb compatible with the subject's category.
pub fn verb_for<R: Rng>(rng: &mut R, subject: &NounPhrase) -> usize {
    if subject.category() == NounCategory::Thing {
        *THING_VERBS.choose(rng).unwrap()
    } else {
        rng.random_range(0..VERBS.len())
    }
}

pub fn random_clause<R: Rng>(rng: &mut R, subject: NounPhrase, style: &ClauseStyle) -> Clause {
    let verb = verb_for(rng, &subject);
    let object = VERBS[verb].transitive.then(|| {
        let noun = rng.random_range(0..NOUNS.len());
        random_noun_phrase(rng, noun, style, true)
    });
    let negation = if rng.random_bool(style.negation_rate) {
        if rng.random_bool(0.7) {
            Negation::Auxiliary
        } else {
            Negation::Never
        }
    } else {
        Negation::None
    };
    let adverb = rng.random_bool(style.adverb_rate).then(|| *ADVERBS.choose(rng).unwrap());
    let prepositional = rng.random_bool(style.prepositional_rate).then(|| {
        let noun = rng.random_range(0..NOUNS.len());
        (*PREPOSITIONS.choose(rng).unwrap(), random_noun_phrase(rng, noun, style, true))
    });
    Clause {
        subject,
        pronoun_subject: false,
        verb,
        negation,
        object,
        adverb,
        prepositional,
    }
}

/// Generates a story of at least `min_words` tokens.
///
/// Paragraphs follow one protagonist for several sentences (definite
/// reference and pronouns after the introduction), so content varies slowly
/// along the text.
pub fn story<R: Rng>(rng: &mut R, lexicon: &Lexicon, min_words: usize) -> Vec<Token> {
    let style = ClauseStyle::default();
    let mut words: Vec<&'static str> = Vec::new();
    while words.len() < min_words {
        let category = match rng.random_range(0..10) {
            0..=3 => NounCategory::Animal,
            4..=8 => NounCategory::Person,
            _ => NounCategory::Thing,
        };
        let noun = *nouns_in(category).choose(rng).unwrap();
        let mut protagonist = random_noun_phrase(rng, noun, &style, true);
        protagonist.determiner = if protagonist.plural { "some" } else { "a" };
        let sentences = rng.random_range(3..=6);
        for s in 0..sentences {
            let mut clause = random_clause(rng, protagonist.clone(), &style);
            if s > 0 {
                clause.subject.determiner = "the";
                clause.subject.adjectives.clear();
                clause.pronoun_subject = rng.random_bool(0.4);
            }
            words.extend(clause.words(false));
            if rng.random_bool(0.35) {
                words.push(CONNECTIVES.choose(rng).unwrap());
                let mut second = random_clause(rng, protagonist.clone(), &style);
                second.pronoun_subject = true;
                words.extend(second.words(false));
            }
            words.push(".");
        }
    }
    words.iter().map(|w| lexicon.id(w)).collect()
}
