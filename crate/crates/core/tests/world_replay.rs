//! Replays each video's script with hand-written motion rules and compares
//! the result with the generator's frames, byte for byte. Also checks each
//! action's visible signature directly on the rendered frames.

use vidnarr_core::grammar::{Action, Direction, Grammar};
use vidnarr_core::world::{generate_world, TimedEvent, VideoRecord, WorldConfig};

type Cell = (i64, i64);

fn step(d: Direction) -> Cell {
    match d {
        Direction::Left => (-1, 0),
        Direction::Right => (1, 0),
        Direction::Up => (0, -1),
        Direction::Down => (0, 1),
    }
}

/// Cells a shape covers `l` frames into an event of length `len`, plus the
/// hand cell. Move: one cell every second frame. Flash: visible on even
/// frames. Grow: a plus after the first third, a 3x3 block after the second,
/// clipped to the grid. Shake: toggles to the right neighbour (left at the
/// right edge) on odd frames.
fn expected(ev: &TimedEvent, home: Cell, l: i64, len: i64, grid: i64) -> (Vec<Cell>, Cell) {
    let (x, y) = home;
    match ev.event.action {
        Action::Move => {
            let (dx, dy) = step(ev.event.direction.expect("move has a direction"));
            let k = (l + 1) / 2;
            let p = (x + dx * k, y + dy * k);
            (vec![p], p)
        }
        Action::Flash => (if l % 2 == 0 { vec![home] } else { vec![] }, home),
        Action::Grow => {
            let r = if 3 * l < len { 0 } else if 3 * l < 2 * len { 1 } else { 2 };
            let mut cells = Vec::new();
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let ring = dx.abs() + dy.abs();
                    let keep = match r {
                        0 => ring == 0,
                        1 => ring <= 1,
                        _ => true,
                    };
                    let c = (x + dx, y + dy);
                    if keep && c.0 >= 0 && c.1 >= 0 && c.0 < grid && c.1 < grid {
                        cells.push(c);
                    }
                }
            }
            (cells, home)
        }
        Action::Shake => {
            let side = if x + 1 < grid { 1 } else { -1 };
            let p = (x + side * (l % 2), y);
            (vec![p], p)
        }
    }
}

fn replay(video: &VideoRecord, grammar: &Grammar) -> Vec<u8> {
    let grid = video.grid_size as i64;
    let plane = (grid * grid) as usize;
    let fsize = video.channels * plane;
    let n = video.num_frames();
    let mut out = vec![0u8; n * fsize];
    let mut home: Vec<Cell> = video.shapes.iter().map(|s| (s.x as i64, s.y as i64)).collect();
    let script = video.script();
    let set = |buf: &mut [u8], ch: usize, (x, y): Cell| buf[ch * plane + (y * grid + x) as usize] = 1;
    for f in 0..n {
        let active = script.iter().find(|ev| ev.t <= f && f < ev.e);
        let frame = &mut out[f * fsize..(f + 1) * fsize];
        for (i, shape) in video.shapes.iter().enumerate() {
            let (color, kind) = grammar.object_parts(shape.object);
            let cells = match active {
                Some(ev) if ev.event.object == shape.object => {
                    let (cells, hand) = expected(ev, home[i], (f - ev.t) as i64, (ev.e - ev.t) as i64, grid);
                    set(frame, grammar.num_colors() + grammar.num_kinds() + ev.event.actor, hand);
                    cells
                }
                _ => vec![home[i]],
            };
            for c in cells {
                set(frame, color, c);
                set(frame, grammar.num_colors() + kind, c);
            }
        }
        // Commit a finished move before the next frame.
        if let Some(ev) = active {
            if f + 1 == ev.e && ev.event.action == Action::Move {
                let i = video.shapes.iter().position(|s| s.object == ev.event.object).unwrap();
                let (dx, dy) = step(ev.event.direction.unwrap());
                let k = ((ev.e - ev.t) as i64 + 1) / 2;
                home[i] = (home[i].0 + dx * k, home[i].1 + dy * k);
            }
        }
    }
    out
}

fn world(seed: u64, len_min: usize, len_max: usize) -> Vec<VideoRecord> {
    generate_world(&WorldConfig {
        grid_size: 8,
        num_shapes: 3,
        video_length: 120,
        event_rate: 0.6,
        num_videos: 6,
        event_len_min: len_min,
        event_len_max: len_max,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
}

#[test]
fn frames_match_an_independent_replay() {
    let grammar = Grammar::standard();
    for (seed, lo, hi) in [(7, 6, 6), (11, 3, 9), (12, 1, 2)] {
        for v in world(seed, lo, hi) {
            assert_eq!(v.num_frames(), 120);
            let script = v.script();
            assert_eq!(script.first().map(|e| e.t), Some(0));
            for w in script.windows(2) {
                assert_eq!(w[0].e, w[1].t);
            }
            assert_eq!(script.last().map(|e| e.e), Some(120));
            let replayed = replay(&v, &grammar);
            for f in 0..v.num_frames() {
                assert_eq!(&replayed[f * v.frame_size()..(f + 1) * v.frame_size()], v.frame(f), "{} frame {f}", v.id);
            }
        }
    }
}

/// Cells where a shape's colour and kind channels are both lit.
fn occupied(v: &VideoRecord, grammar: &Grammar, object: usize, f: usize) -> Vec<(usize, usize)> {
    let (color, kind) = grammar.object_parts(object);
    let g = v.grid_size;
    let mut out = Vec::new();
    for y in 0..g {
        for x in 0..g {
            if v.cell(f, color, y, x) == 1 && v.cell(f, grammar.num_colors() + kind, y, x) == 1 {
                out.push((x, y));
            }
        }
    }
    out
}

#[test]
fn annotated_events_show_their_action() {
    let grammar = Grammar::standard();
    let actor_base = grammar.num_colors() + grammar.num_kinds();
    for v in world(7, 6, 6) {
        let colors: Vec<usize> = v.shapes.iter().map(|s| grammar.object_parts(s.object).0).collect();
        let unique_color = |o: usize| colors.iter().filter(|&&c| c == grammar.object_parts(o).0).count() == 1;
        for ev in &v.events {
            let o = ev.event.object;
            let first = ev.t;
            let last = ev.e - 1;
            // The named actor's hand is the only lit actor cell.
            for f in ev.t..ev.e {
                let mut lit = Vec::new();
                for a in 0..grammar.num_actors() {
                    for y in 0..v.grid_size {
                        for x in 0..v.grid_size {
                            if v.cell(f, actor_base + a, y, x) == 1 {
                                lit.push(a);
                            }
                        }
                    }
                }
                assert_eq!(lit, vec![ev.event.actor]);
            }
            if !unique_color(o) {
                continue;
            }
            let at = |f| occupied(&v, &grammar, o, f);
            match ev.event.action {
                Action::Move => {
                    let (dx, dy) = step(ev.event.direction.unwrap());
                    let (a, b) = (at(first), at(last));
                    assert!(!a.is_empty() && !b.is_empty());
                    let shift = (b[0].0 as i64 - a[0].0 as i64, b[0].1 as i64 - a[0].1 as i64);
                    assert!(shift.0 * dx + shift.1 * dy >= 2, "{ev:?}");
                    assert_eq!(shift.0 * dy - shift.1 * dx, 0);
                }
                Action::Flash => {
                    for f in ev.t..ev.e {
                        assert_eq!(at(f).is_empty(), (f - ev.t) % 2 == 1);
                    }
                }
                Action::Grow => {
                    let sizes: Vec<usize> = (ev.t..ev.e).map(|f| at(f).len()).collect();
                    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
                    assert!(sizes[sizes.len() - 1] > sizes[0]);
                }
                Action::Shake => {
                    let a = at(first);
                    for f in ev.t..ev.e {
                        assert_eq!(at(f) == a, (f - ev.t) % 2 == 0, "{ev:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn narrations_parse_back_to_their_events() {
    let grammar = Grammar::standard();
    for v in world(7, 6, 6) {
        for ev in v.script() {
            let words = vidnarr_core::world::narrate_event(&ev.event, &grammar).unwrap();
            assert!(words.len() >= 4);
            let (class, phrasing) = grammar.parse(&words).unwrap();
            assert_eq!(class, ev.event.class());
            assert_eq!(phrasing, ev.event.phrasing);
        }
    }
}
