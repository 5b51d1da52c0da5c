//! Closed template grammar for grid-world narrations.
//!
//! Every narration names an actor, an action, an object (color + shape kind)
//! and, for moves, a direction. Surface variety comes from verb/noun/direction
//! synonyms and three word-order templates; [`Grammar::parse`] inverts any
//! surface form back to its [`EventClass`].

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<s>";
pub const EOS: &str = "</s>";

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Unit step as (dx, dy); y grows downward.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Move,
    Flash,
    Grow,
    Shake,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Move, Action::Flash, Action::Grow, Action::Shake];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Catalog(format!("action id {i} out of range")))
    }
}

/// Word-order template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    /// `C moves the red square left`
    Active,
    /// `C moves left the red square` (moves only)
    DirectionFirst,
    /// `the red square is moved left by C`
    Passive,
}

/// Surface choices for one narration. All-zero synonyms with
/// [`Template::Active`] is the canonical phrasing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Phrasing {
    pub template: Template,
    pub verb: usize,
    pub noun: usize,
    pub direction: usize,
}

impl Phrasing {
    pub const CANONICAL: Phrasing = Phrasing {
        template: Template::Active,
        verb: 0,
        noun: 0,
        direction: 0,
    };
}

impl Default for Phrasing {
    fn default() -> Self {
        Self::CANONICAL
    }
}

/// What a narration means, independent of phrasing. Two clips are relevant to
/// each other iff their narrations parse to the same class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventClass {
    pub actor: usize,
    pub action: Action,
    pub object: usize,
    pub direction: Option<Direction>,
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}:{}", self.actor, self.action, self.object)?;
        if let Some(d) = self.direction {
            write!(f, ":{d:?}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct VerbForms {
    present: &'static str,
    participle: &'static str,
}

const fn vf(present: &'static str, participle: &'static str) -> VerbForms {
    VerbForms {
        present,
        participle,
    }
}

/// Synonym classes and templates. [`Grammar::standard`] is the world grammar;
/// [`Grammar::plain`] has a single surface form per event.
#[derive(Clone, Debug)]
pub struct Grammar {
    actors: Vec<&'static str>,
    colors: Vec<&'static str>,
    kinds: Vec<Vec<&'static str>>,
    verbs: Vec<Vec<VerbForms>>,
    directions: Vec<Vec<&'static str>>,
    templates: Vec<Template>,
}

impl Grammar {
    pub fn standard() -> Self {
        Self {
            actors: vec!["C", "O"],
            colors: vec!["red", "green", "blue"],
            kinds: vec![
                vec!["square", "block"],
                vec!["circle", "disc"],
                vec!["triangle", "wedge"],
            ],
            verbs: vec![
                vec![vf("moves", "moved"), vf("shifts", "shifted"), vf("slides", "slid")],
                vec![vf("flashes", "flashed"), vf("blinks", "blinked")],
                vec![vf("grows", "grown"), vf("enlarges", "enlarged")],
                vec![vf("shakes", "shaken"), vf("wiggles", "wiggled")],
            ],
            directions: vec![
                vec!["left", "leftward"],
                vec!["right", "rightward"],
                vec!["up", "upward"],
                vec!["down", "downward"],
            ],
            templates: vec![Template::Active, Template::DirectionFirst, Template::Passive],
        }
    }

    /// One synonym per class and only the active template.
    pub fn plain() -> Self {
        let mut g = Self::standard();
        for k in &mut g.kinds {
            k.truncate(1);
        }
        for v in &mut g.verbs {
            v.truncate(1);
        }
        for d in &mut g.directions {
            d.truncate(1);
        }
        g.templates = vec![Template::Active];
        g
    }

    pub fn num_actors(&self) -> usize {
        self.actors.len()
    }

    pub fn num_colors(&self) -> usize {
        self.colors.len()
    }

    pub fn num_kinds(&self) -> usize {
        self.kinds.len()
    }

    /// Objects are (color, kind) pairs: `object = color * num_kinds + kind`.
    pub fn num_objects(&self) -> usize {
        self.colors.len() * self.kinds.len()
    }

    pub fn object_parts(&self, object: usize) -> (usize, usize) {
        (object / self.kinds.len(), object % self.kinds.len())
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// Every event class the grammar can express.
    pub fn all_classes(&self) -> Vec<EventClass> {
        let mut out = Vec::new();
        for actor in 0..self.actors.len() {
            for action in Action::ALL {
                for object in 0..self.num_objects() {
                    if action == Action::Move {
                        for d in Direction::ALL {
                            out.push(EventClass {
                                actor,
                                action,
                                object,
                                direction: Some(d),
                            });
                        }
                    } else {
                        out.push(EventClass {
                            actor,
                            action,
                            object,
                            direction: None,
                        });
                    }
                }
            }
        }
        out
    }

    /// Every phrasing valid for `class`, canonical first.
    pub fn phrasings(&self, class: &EventClass) -> Vec<Phrasing> {
        let (_, kind) = self.object_parts(class.object);
        let verbs = self.verbs[class.action.index()].len();
        let nouns = self.kinds[kind].len();
        let dirs = match class.direction {
            Some(d) => self.directions[d.index()].len(),
            None => 1,
        };
        let mut out = Vec::new();
        for &template in &self.templates {
            if template == Template::DirectionFirst && class.direction.is_none() {
                continue;
            }
            for verb in 0..verbs {
                for noun in 0..nouns {
                    for direction in 0..dirs {
                        out.push(Phrasing {
                            template,
                            verb,
                            noun,
                            direction,
                        });
                    }
                }
            }
        }
        out
    }

    fn validate(&self, class: &EventClass) -> Result<()> {
        if class.actor >= self.actors.len() {
            return Err(Error::Catalog(format!("actor id {} out of range", class.actor)));
        }
        if class.object >= self.num_objects() {
            return Err(Error::Catalog(format!("object id {} out of range", class.object)));
        }
        match (class.action, class.direction) {
            (Action::Move, None) => Err(Error::Catalog("move without a direction".into())),
            (a, Some(_)) if a != Action::Move => {
                Err(Error::Catalog(format!("{a:?} takes no direction")))
            }
            _ => Ok(()),
        }
    }

    /// Render `class` with the given surface choices.
    pub fn realize(&self, class: &EventClass, phrasing: &Phrasing) -> Result<Vec<String>> {
        self.validate(class)?;
        let (color, kind) = self.object_parts(class.object);
        let verb = self.verbs[class.action.index()]
            .get(phrasing.verb)
            .ok_or_else(|| Error::Catalog(format!("verb synonym {} out of range", phrasing.verb)))?;
        let noun = self.kinds[kind]
            .get(phrasing.noun)
            .ok_or_else(|| Error::Catalog(format!("noun synonym {} out of range", phrasing.noun)))?;
        let dir = match class.direction {
            Some(d) => Some(*self.directions[d.index()].get(phrasing.direction).ok_or_else(|| {
                Error::Catalog(format!("direction synonym {} out of range", phrasing.direction))
            })?),
            None => None,
        };
        if !self.templates.contains(&phrasing.template) {
            return Err(Error::Catalog(format!("template {:?} not in grammar", phrasing.template)));
        }
        let actor = self.actors[class.actor];
        let color = self.colors[color];
        let mut out: Vec<&str> = Vec::with_capacity(8);
        match phrasing.template {
            Template::Active => {
                out.extend([actor, verb.present, "the", color, noun]);
                out.extend(dir);
            }
            Template::DirectionFirst => {
                let d = dir.ok_or_else(|| Error::Catalog("direction-first needs a direction".into()))?;
                out.extend([actor, verb.present, d, "the", color, noun]);
            }
            Template::Passive => {
                out.extend(["the", color, noun, "is", verb.participle]);
                out.extend(dir);
                out.extend(["by", actor]);
            }
        }
        Ok(out.into_iter().map(String::from).collect())
    }

    /// Inverse of [`Grammar::realize`]. Returns `None` for anything the
    /// grammar cannot produce.
    pub fn parse<S: AsRef<str>>(&self, tokens: &[S]) -> Option<(EventClass, Phrasing)> {
        let t: Vec<&str> = tokens.iter().map(|s| s.as_ref()).collect();
        let actor = |w: &str| self.actors.iter().position(|a| *a == w);
        let color = |w: &str| self.colors.iter().position(|c| *c == w);
        let kind = |w: &str| {
            self.kinds
                .iter()
                .enumerate()
                .find_map(|(k, syn)| syn.iter().position(|s| *s == w).map(|n| (k, n)))
        };
        let verb = |w: &str, passive: bool| {
            self.verbs.iter().enumerate().find_map(|(a, syn)| {
                syn.iter()
                    .position(|f| if passive { f.participle == w } else { f.present == w })
                    .map(|v| (a, v))
            })
        };
        let dir = |w: &str| {
            self.directions
                .iter()
                .enumerate()
                .find_map(|(d, syn)| syn.iter().position(|s| *s == w).map(|n| (d, n)))
        };
        let has = |tpl: Template| self.templates.contains(&tpl);

        let build = |actor: usize,
                     (action, verb): (usize, usize),
                     color: usize,
                     (kind, noun): (usize, usize),
                     d: Option<(usize, usize)>,
                     template: Template| {
            let action = Action::ALL[action];
            let direction = d.map(|(d, _)| Direction::ALL[d]);
            if (action == Action::Move) != direction.is_some() {
                return None;
            }
            Some((
                EventClass {
                    actor,
                    action,
                    object: color * self.kinds.len() + kind,
                    direction,
                },
                Phrasing {
                    template,
                    verb,
                    noun,
                    direction: d.map(|(_, n)| n).unwrap_or(0),
                },
            ))
        };

        match t.as_slice() {
            [a, v, "the", c, k] if has(Template::Active) => {
                build(actor(a)?, verb(v, false)?, color(c)?, kind(k)?, None, Template::Active)
            }
            [a, v, "the", c, k, d] if has(Template::Active) => build(
                actor(a)?,
                verb(v, false)?,
                color(c)?,
                kind(k)?,
                Some(dir(d)?),
                Template::Active,
            ),
            [a, v, d, "the", c, k] if has(Template::DirectionFirst) => build(
                actor(a)?,
                verb(v, false)?,
                color(c)?,
                kind(k)?,
                Some(dir(d)?),
                Template::DirectionFirst,
            ),
            ["the", c, k, "is", v, "by", a] if has(Template::Passive) => build(
                actor(a)?,
                verb(v, true)?,
                color(c)?,
                kind(k)?,
                None,
                Template::Passive,
            ),
            ["the", c, k, "is", v, d, "by", a] if has(Template::Passive) => build(
                actor(a)?,
                verb(v, true)?,
                color(c)?,
                kind(k)?,
                Some(dir(d)?),
                Template::Passive,
            ),
            _ => None,
        }
    }

    pub fn parse_str(&self, sentence: &str) -> Option<(EventClass, Phrasing)> {
        let toks: Vec<&str> = sentence.split_whitespace().collect();
        self.parse(&toks)
    }

    /// Word list in a fixed order, without special tokens.
    pub fn words(&self) -> Vec<&'static str> {
        let mut words: Vec<&'static str> = vec!["the", "is", "by"];
        words.extend(&self.actors);
        words.extend(&self.colors);
        for k in &self.kinds {
            words.extend(k);
        }
        for v in &self.verbs {
            for f in v {
                words.push(f.present);
                words.push(f.participle);
            }
        }
        for d in &self.directions {
            words.extend(d);
        }
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(*w));
        words
    }
}

/// Token ↔ id mapping with `<pad>`, `<s>`, `</s>` at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut tokens = vec![PAD.to_string(), SOS.to_string(), EOS.to_string()];
        for w in words {
            let w = w.into();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn from_grammar(grammar: &Grammar) -> Self {
        Self::new(grammar.words())
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn encode_str(&self, sentence: &str) -> Result<Vec<usize>> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Drop specials and join with spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > EOS_ID)
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_move_sentence() {
        let g = Grammar::standard();
        let class = EventClass {
            actor: 0,
            action: Action::Move,
            object: 0,
            direction: Some(Direction::Left),
        };
        let s = g.realize(&class, &Phrasing::CANONICAL).unwrap().join(" ");
        assert_eq!(s, "C moves the red square left");
    }

    #[test]
    fn every_phrasing_of_every_class_round_trips() {
        let g = Grammar::standard();
        let vocab = Vocab::from_grammar(&g);
        let mut n = 0;
        for class in g.all_classes() {
            for p in g.phrasings(&class) {
                let toks = g.realize(&class, &p).unwrap();
                assert!(toks.len() >= 4);
                vocab.encode(&toks).unwrap();
                assert_eq!(g.parse(&toks), Some((class, p)), "{}", toks.join(" "));
                n += 1;
            }
        }
        assert!(n > 500);
    }

    #[test]
    fn distinct_classes_never_share_a_surface_form() {
        let g = Grammar::standard();
        let mut seen: HashMap<String, EventClass> = HashMap::new();
        for class in g.all_classes() {
            for p in g.phrasings(&class) {
                let s = g.realize(&class, &p).unwrap().join(" ");
                if let Some(prev) = seen.insert(s.clone(), class) {
                    assert_eq!(prev, class, "{s}");
                }
            }
        }
    }

    #[test]
    fn bad_ids_are_catalog_errors() {
        let g = Grammar::standard();
        let bad = EventClass {
            actor: 7,
            action: Action::Flash,
            object: 0,
            direction: None,
        };
        assert!(matches!(g.realize(&bad, &Phrasing::CANONICAL), Err(Error::Catalog(_))));
        let no_dir = EventClass {
            actor: 0,
            action: Action::Move,
            object: 0,
            direction: None,
        };
        assert!(matches!(g.realize(&no_dir, &Phrasing::CANONICAL), Err(Error::Catalog(_))));
        assert!(matches!(Action::from_index(9), Err(Error::Catalog(_))));
    }

    #[test]
    fn plain_grammar_has_one_phrasing_per_class() {
        let g = Grammar::plain();
        for class in g.all_classes() {
            assert_eq!(g.phrasings(&class).len(), 1);
        }
    }

    #[test]
    fn unknown_words_do_not_parse_or_encode() {
        let g = Grammar::standard();
        assert!(g.parse_str("C opens the door").is_none());
        let v = Vocab::from_grammar(&g);
        assert!(matches!(v.encode_str("C opens"), Err(Error::Vocab(w)) if w == "opens"));
    }
}
