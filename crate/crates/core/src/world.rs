//! Procedural grid-world videos with a ground-truth event script.
//!
//! A video is a timeline of back-to-back events, each one shape being acted
//! on by an actor. A fraction of the events (`event_rate`) is annotated and
//! becomes ground truth; the rest stay in the video as unlabeled background
//! activity, so the gaps between annotations are not empty footage.
//!
//! Frames are binary occupancy maps with one channel per color, one per
//! shape kind and one per actor. The actor channel marks the cell of the
//! shape being acted on for the duration of the event.

use base64::Engine;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Action, Direction, EventClass, Grammar, Phrasing, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub grid_size: usize,
    pub num_shapes: usize,
    /// Frames per video.
    pub video_length: usize,
    /// Target fraction of the timeline covered by annotated events.
    pub event_rate: f64,
    pub num_videos: usize,
    pub event_len_min: usize,
    pub event_len_max: usize,
    /// Probability that an annotation uses a non-canonical phrasing.
    pub phrasing_variety: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            num_shapes: 3,
            video_length: 120,
            event_rate: 0.6,
            num_videos: 16,
            event_len_min: 6,
            event_len_max: 6,
            phrasing_variety: 0.5,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_size < 4 {
            return err("grid_size must be at least 4");
        }
        if self.num_shapes == 0 || self.video_length == 0 || self.num_videos == 0 {
            return err("num_shapes, video_length and num_videos must be positive");
        }
        if !(self.event_rate > 0.0 && self.event_rate <= 1.0) {
            return err("event_rate must lie in (0, 1]");
        }
        if self.event_len_min == 0 || self.event_len_min > self.event_len_max {
            return err("need 0 < event_len_min <= event_len_max");
        }
        if !(0.0..=1.0).contains(&self.phrasing_variety) {
            return err("phrasing_variety must lie in [0, 1]");
        }
        let grammar = Grammar::standard();
        if self.num_shapes > grammar.num_objects() {
            return err("num_shapes exceeds the object catalog");
        }
        if self.num_shapes > self.grid_size * self.grid_size {
            return err("more shapes than cells");
        }
        Ok(())
    }

    /// The closed token set narrations are drawn from.
    pub fn vocab(&self) -> Vocab {
        Vocab::from_grammar(&Grammar::standard())
    }

    pub fn channels(&self) -> usize {
        frame_channels(&Grammar::standard())
    }
}

pub fn frame_channels(grammar: &Grammar) -> usize {
    grammar.num_colors() + grammar.num_kinds() + grammar.num_actors()
}

/// One atomic action by an actor on an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub action: Action,
    pub actor: usize,
    pub object: usize,
    pub direction: Option<Direction>,
    /// How the annotator phrased it.
    #[serde(default)]
    pub phrasing: Phrasing,
}

impl Event {
    pub fn class(&self) -> EventClass {
        EventClass {
            actor: self.actor,
            action: self.action,
            object: self.object,
            direction: self.direction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t: usize,
    pub e: usize,
    pub event: Event,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeInit {
    pub object: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub grid_size: usize,
    pub channels: usize,
    /// `num_frames * channels * grid * grid` bytes, 0 or 1, frame-major.
    pub frames: Vec<u8>,
    pub shapes: Vec<ShapeInit>,
    /// Annotated events, in time order.
    pub events: Vec<TimedEvent>,
    /// Unannotated activity filling the rest of the timeline.
    pub background: Vec<TimedEvent>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.frame_size()
    }

    pub fn frame_size(&self) -> usize {
        self.channels * self.grid_size * self.grid_size
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.frame_size();
        &self.frames[f * n..(f + 1) * n]
    }

    pub fn cell(&self, f: usize, c: usize, y: usize, x: usize) -> u8 {
        let g = self.grid_size;
        self.frame(f)[c * g * g + y * g + x]
    }

    /// Annotated and background events merged in time order.
    pub fn script(&self) -> Vec<TimedEvent> {
        let mut all: Vec<TimedEvent> = self.events.iter().chain(&self.background).copied().collect();
        all.sort_by_key(|ev| ev.t);
        all
    }
}

#[derive(Serialize, Deserialize)]
struct VideoRecordJson {
    id: String,
    grid_size: usize,
    channels: usize,
    num_frames: usize,
    frames_b64: String,
    shapes: Vec<ShapeInit>,
    events: Vec<TimedEvent>,
    background: Vec<TimedEvent>,
}

impl Serialize for VideoRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VideoRecordJson {
            id: self.id.clone(),
            grid_size: self.grid_size,
            channels: self.channels,
            num_frames: self.num_frames(),
            frames_b64: base64::engine::general_purpose::STANDARD.encode(&self.frames),
            shapes: self.shapes.clone(),
            events: self.events.clone(),
            background: self.background.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VideoRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = VideoRecordJson::deserialize(d)?;
        let frames = base64::engine::general_purpose::STANDARD
            .decode(&j.frames_b64)
            .map_err(serde::de::Error::custom)?;
        if frames.len() != j.num_frames * j.channels * j.grid_size * j.grid_size {
            return Err(serde::de::Error::custom("frame buffer size mismatch"));
        }
        Ok(VideoRecord {
            id: j.id,
            grid_size: j.grid_size,
            channels: j.channels,
            frames,
            shapes: j.shapes,
            events: j.events,
            background: j.background,
        })
    }
}

/// Ground-truth narration for an event.
pub fn narrate_event(event: &Event, grammar: &Grammar) -> Result<Vec<String>> {
    grammar.realize(&event.class(), &event.phrasing)
}

/// Cells occupied by a shape `local` frames into an event of length `len`,
/// and the cell the actor's hand marks. `(x, y)` is the shape's home cell at
/// event start.
pub(crate) fn action_cells(
    action: Action,
    direction: Option<Direction>,
    x: usize,
    y: usize,
    local: usize,
    len: usize,
    grid: usize,
) -> (Vec<(usize, usize)>, (usize, usize)) {
    let g = grid as i32;
    let (xi, yi) = (x as i32, y as i32);
    let inside = |(cx, cy): (i32, i32)| cx >= 0 && cy >= 0 && cx < g && cy < g;
    match action {
        Action::Move => {
            let (dx, dy) = direction.expect("move has a direction").delta();
            let k = ((local + 1) / 2) as i32;
            let p = ((xi + dx * k) as usize, (yi + dy * k) as usize);
            (vec![p], p)
        }
        Action::Flash => {
            let cells = if local % 2 == 0 { vec![(x, y)] } else { vec![] };
            (cells, (x, y))
        }
        Action::Grow => {
            let radius = if 3 * local < len { 0 } else if 3 * local < 2 * len { 1 } else { 2 };
            let mut offsets = vec![(0, 0)];
            if radius >= 1 {
                offsets.extend([(-1, 0), (1, 0), (0, -1), (0, 1)]);
            }
            if radius >= 2 {
                offsets.extend([(-1, -1), (1, -1), (-1, 1), (1, 1)]);
            }
            let cells = offsets
                .into_iter()
                .map(|(dx, dy)| (xi + dx, yi + dy))
                .filter(|&c| inside(c))
                .map(|(cx, cy)| (cx as usize, cy as usize))
                .collect();
            (cells, (x, y))
        }
        Action::Shake => {
            let dir = if x + 1 < grid { 1 } else { -1 };
            let p = ((xi + dir * (local % 2) as i32) as usize, y);
            (vec![p], p)
        }
    }
}

/// Home cell after an event completes.
pub(crate) fn final_position(action: Action, direction: Option<Direction>, x: usize, y: usize, len: usize) -> (usize, usize) {
    match action {
        Action::Move => {
            let (dx, dy) = direction.expect("move has a direction").delta();
            let k = ((len + 1) / 2) as i32;
            ((x as i32 + dx * k) as usize, (y as i32 + dy * k) as usize)
        }
        _ => (x, y),
    }
}

fn feasible_directions(x: usize, y: usize, len: usize, grid: usize) -> Vec<Direction> {
    let k = (len + 1) / 2;
    Direction::ALL
        .into_iter()
        .filter(|d| {
            let (dx, dy) = d.delta();
            let nx = x as i64 + dx as i64 * k as i64;
            let ny = y as i64 + dy as i64 * k as i64;
            nx >= 0 && ny >= 0 && nx < grid as i64 && ny < grid as i64
        })
        .collect()
}

fn random_phrasing<R: Rng>(grammar: &Grammar, class: &EventClass, variety: f64, rng: &mut R) -> Phrasing {
    if rng.random::<f64>() >= variety {
        return Phrasing::CANONICAL;
    }
    let options = grammar.phrasings(class);
    *options.choose(rng).expect("at least the canonical phrasing")
}

/// Generate `config.num_videos` videos. Deterministic in `config`.
pub fn generate_world(config: &WorldConfig) -> Result<Vec<VideoRecord>> {
    config.validate()?;
    let grammar = Grammar::standard();
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_videos)
        .map(|i| {
            let seed = master.random::<u64>();
            generate_video(config, &grammar, format!("v{:04}-s{}", i, config.seed), seed)
        })
        .collect()
}

fn generate_video(config: &WorldConfig, grammar: &Grammar, id: String, seed: u64) -> Result<VideoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = config.grid_size;
    let objects: Vec<usize> = rand::seq::index::sample(&mut rng, grammar.num_objects(), config.num_shapes).into_vec();
    let cells: Vec<usize> = rand::seq::index::sample(&mut rng, grid * grid, config.num_shapes).into_vec();
    let shapes: Vec<ShapeInit> = objects
        .iter()
        .zip(&cells)
        .map(|(&object, &c)| ShapeInit {
            object,
            x: c % grid,
            y: c / grid,
        })
        .collect();

    let mut pos: Vec<(usize, usize)> = shapes.iter().map(|s| (s.x, s.y)).collect();
    let mut events = Vec::new();
    let mut background = Vec::new();
    let mut t = 0;
    while t < config.video_length {
        let len = rng
            .random_range(config.event_len_min..=config.event_len_max)
            .min(config.video_length - t);
        let who = rng.random_range(0..shapes.len());
        let (x, y) = pos[who];
        let mut action = Action::ALL[rng.random_range(0..Action::ALL.len())];
        let mut direction = None;
        if action == Action::Move {
            let dirs = feasible_directions(x, y, len, grid);
            match dirs.choose(&mut rng) {
                Some(d) => direction = Some(*d),
                None => action = Action::Flash,
            }
        }
        let class = EventClass {
            actor: rng.random_range(0..grammar.num_actors()),
            action,
            object: shapes[who].object,
            direction,
        };
        let phrasing = random_phrasing(grammar, &class, config.phrasing_variety, &mut rng);
        let timed = TimedEvent {
            t,
            e: t + len,
            event: Event {
                action,
                actor: class.actor,
                object: class.object,
                direction,
                phrasing,
            },
        };
        if rng.random::<f64>() < config.event_rate {
            events.push(timed);
        } else {
            background.push(timed);
        }
        pos[who] = final_position(action, direction, x, y, len);
        t += len;
    }

    let mut video = VideoRecord {
        id,
        grid_size: grid,
        channels: frame_channels(grammar),
        frames: Vec::new(),
        shapes,
        events,
        background,
    };
    video.frames = render(&video, config.video_length, grammar);
    Ok(video)
}

/// Draw every frame from the initial layout and the merged script.
fn render(video: &VideoRecord, num_frames: usize, grammar: &Grammar) -> Vec<u8> {
    let grid = video.grid_size;
    let plane = grid * grid;
    let fsize = video.channels * plane;
    let mut frames = vec![0u8; num_frames * fsize];
    let mut pos: Vec<(usize, usize)> = video.shapes.iter().map(|s| (s.x, s.y)).collect();
    let script = video.script();
    let mut next = 0;
    let mut active: Option<TimedEvent> = None;
    for f in 0..num_frames {
        if let Some(ev) = active {
            if f >= ev.e {
                let who = shape_index(video, ev.event.object);
                let (x, y) = pos[who];
                pos[who] = final_position(ev.event.action, ev.event.direction, x, y, ev.e - ev.t);
                active = None;
            }
        }
        if active.is_none() && next < script.len() && script[next].t == f {
            active = Some(script[next]);
            next += 1;
        }
        let frame = &mut frames[f * fsize..(f + 1) * fsize];
        for (i, shape) in video.shapes.iter().enumerate() {
            let (color, kind) = grammar.object_parts(shape.object);
            let cells = match active {
                Some(ev) if ev.event.object == shape.object => {
                    let (cells, hand) = action_cells(
                        ev.event.action,
                        ev.event.direction,
                        pos[i].0,
                        pos[i].1,
                        f - ev.t,
                        ev.e - ev.t,
                        grid,
                    );
                    let ch = grammar.num_colors() + grammar.num_kinds() + ev.event.actor;
                    frame[ch * plane + hand.1 * grid + hand.0] = 1;
                    cells
                }
                _ => vec![pos[i]],
            };
            for (cx, cy) in cells {
                frame[color * plane + cy * grid + cx] = 1;
                frame[(grammar.num_colors() + kind) * plane + cy * grid + cx] = 1;
            }
        }
    }
    frames
}

fn shape_index(video: &VideoRecord, object: usize) -> usize {
    video
        .shapes
        .iter()
        .position(|s| s.object == object)
        .expect("event refers to a shape in the video")
}
