//! Deterministic synthetic video-caption corpus.
//!
//! Each clip shows one or two colored shapes on a black canvas. A clip's
//! event script fully determines both its pixels and its caption, and every
//! script can be time-reversed exactly: rendering the reversed script gives
//! the reversed frames.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frames_io::{write_all, write_vofr};
use super::manifest::{DatasetManifest, ManifestRecord, QaPair};
use super::{MediaError, VideoClip, CHANNELS};
use crate::rng::{stream, StreamRng};

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 220, 40]),
    ("white", [240, 240, 240]),
    ("purple", [160, 60, 200]),
    ("orange", [240, 140, 30]),
    ("cyan", [40, 210, 220]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether cell `(dx, dy)` of a `size x size` box is covered.
    fn covers(self, dx: usize, dy: usize, size: usize) -> bool {
        let (cx, cy) = ((2 * dx) as isize - (size as isize - 1), (2 * dy) as isize - (size as isize - 1));
        let s = size as isize;
        match self {
            Shape::Square => true,
            Shape::Circle => cx * cx + cy * cy <= s * s,
            Shape::Triangle => cx.abs() <= dy as isize,
            Shape::Diamond => cx.abs() + cy.abs() <= s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Appears,
    Disappears,
    MovesLeft,
    MovesRight,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::Appears,
        EventKind::Disappears,
        EventKind::MovesLeft,
        EventKind::MovesRight,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            EventKind::Appears => "appears",
            EventKind::Disappears => "disappears",
            EventKind::MovesLeft => "moves left",
            EventKind::MovesRight => "moves right",
        }
    }

    /// The event seen when the clip plays backwards.
    pub fn reversed(self) -> Self {
        match self {
            EventKind::Appears => EventKind::Disappears,
            EventKind::Disappears => EventKind::Appears,
            EventKind::MovesLeft => EventKind::MovesRight,
            EventKind::MovesRight => EventKind::MovesLeft,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<Shape>,
    pub events: Vec<EventKind>,
    /// Fraction of clips scripted as "X then Y" over two objects.
    pub two_event_fraction: f64,
    pub qa_fraction: f64,
    pub shape_size: usize,
    /// Static single-frame image-caption pairs generated alongside.
    pub n_images: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 32,
            frames_per_clip: 8,
            canvas_height: 32,
            canvas_width: 32,
            colors: ["red", "green", "blue", "yellow"].map(String::from).to_vec(),
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle],
            events: EventKind::ALL.to_vec(),
            two_event_fraction: 0.5,
            qa_fraction: 0.25,
            shape_size: 8,
            n_images: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), MediaError> {
        let bad = |m: String| Err(MediaError::InvalidSpec(m));
        if self.frames_per_clip < 4 {
            return bad(format!("frames_per_clip must be >= 4, got {}", self.frames_per_clip));
        }
        if self.colors.len() < 2 || self.shapes.len() < 2 || self.events.is_empty() {
            return bad("need at least two colors, two shapes and one event".into());
        }
        for c in &self.colors {
            if !PALETTE.iter().any(|(n, _)| n == c) {
                return bad(format!("unknown color `{c}`"));
            }
        }
        if !(0.0..=1.0).contains(&self.two_event_fraction) || !(0.0..=1.0).contains(&self.qa_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        let s = self.shape_size;
        if s < 2 || self.canvas_height / 2 < s + 1 || self.canvas_width < s + 2 + (self.frames_per_clip - 1) {
            return bad(format!(
                "canvas {}x{} too small for shape size {s}",
                self.canvas_height, self.canvas_width
            ));
        }
        Ok(())
    }

    fn rgb(&self, color: &str) -> [u8; 3] {
        PALETTE.iter().find(|(n, _)| *n == color).map(|(_, c)| *c).expect("validated color")
    }
}

/// One object and the single event it performs within `span`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub color: String,
    pub shape: Shape,
    pub y: usize,
    pub event: Option<EventKind>,
    /// `[start, end)` frames the event unfolds over.
    pub span: (usize, usize),
    pub x_start: usize,
    /// Pixels per frame while moving; zero for appear/disappear.
    pub velocity: isize,
    /// Appears: visible from this frame on. Disappears: visible before it.
    pub switch: usize,
}

impl ObjectTrack {
    fn visible(&self, t: usize) -> bool {
        match self.event {
            Some(EventKind::Appears) => t >= self.switch,
            Some(EventKind::Disappears) => t < self.switch,
            _ => true,
        }
    }

    fn x(&self, t: usize) -> usize {
        let (s, e) = self.span;
        let clamped = t.clamp(s, e - 1);
        (self.x_start as isize + self.velocity * (clamped - s) as isize) as usize
    }

    fn x_end(&self) -> usize {
        self.x(self.span.1 - 1)
    }

    fn reversed(&self, frames: usize) -> Self {
        Self {
            color: self.color.clone(),
            shape: self.shape,
            y: self.y,
            event: self.event.map(EventKind::reversed),
            span: (frames - self.span.1, frames - self.span.0),
            x_start: self.x_end(),
            velocity: -self.velocity,
            switch: frames - self.switch,
        }
    }

    fn phrase(&self) -> String {
        let base = format!("a {} {}", self.color, self.shape.name());
        match self.event {
            Some(e) => format!("{base} {}", e.phrase()),
            None => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScript {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape_size: usize,
    pub objects: Vec<ObjectTrack>,
}

impl EventScript {
    pub fn is_two_event(&self) -> bool {
        self.objects.iter().filter(|o| o.event.is_some()).count() == 2
    }

    /// Caption produced by the fixed grammar: events in order of onset,
    /// joined by "then"; static scenes list objects top to bottom.
    pub fn caption(&self) -> String {
        let mut events: Vec<&ObjectTrack> = self.objects.iter().filter(|o| o.event.is_some()).collect();
        if events.is_empty() {
            let mut objs: Vec<&ObjectTrack> = self.objects.iter().collect();
            objs.sort_by_key(|o| o.y);
            return objs.iter().map(|o| o.phrase()).collect::<Vec<_>>().join(" and ");
        }
        events.sort_by_key(|o| o.span.0);
        events.iter().map(|o| o.phrase()).collect::<Vec<_>>().join(" then ")
    }

    pub fn reversed(&self) -> Self {
        Self {
            objects: self.objects.iter().map(|o| o.reversed(self.frames)).collect(),
            ..self.clone()
        }
    }

    pub fn render(&self, rgb: impl Fn(&str) -> [u8; 3], clip_id: &str) -> VideoClip {
        let (h, w, s) = (self.height, self.width, self.shape_size);
        let mut pixels = vec![0u8; self.frames * h * w * CHANNELS];
        for t in 0..self.frames {
            let frame = &mut pixels[t * h * w * CHANNELS..(t + 1) * h * w * CHANNELS];
            for o in self.objects.iter().filter(|o| o.visible(t)) {
                let color = rgb(&o.color);
                let x0 = o.x(t);
                for dy in 0..s {
                    for dx in 0..s {
                        if o.shape.covers(dx, dy, s) {
                            let at = ((o.y + dy) * w + x0 + dx) * CHANNELS;
                            frame[at..at + CHANNELS].copy_from_slice(&color);
                        }
                    }
                }
            }
        }
        VideoClip::new(clip_id, self.frames, h, w, CHANNELS, pixels).expect("script fits canvas")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub clips: Vec<VideoClip>,
    pub scripts: Vec<EventScript>,
    pub manifest: DatasetManifest,
    pub images: Vec<VideoClip>,
    pub image_scripts: Vec<EventScript>,
    pub image_manifest: DatasetManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_clips: usize,
    pub n_two_event: usize,
    pub two_event_fraction: f64,
    pub n_qa: usize,
    pub n_images: usize,
    pub frames_per_clip: usize,
    pub canvas: [usize; 2],
    pub seed: u64,
}

impl SyntheticCorpus {
    pub fn summary(&self) -> CorpusSummary {
        let n_two_event = self.scripts.iter().filter(|s| s.is_two_event()).count();
        CorpusSummary {
            n_clips: self.clips.len(),
            n_two_event,
            two_event_fraction: if self.clips.is_empty() {
                0.0
            } else {
                n_two_event as f64 / self.clips.len() as f64
            },
            n_qa: self.manifest.records.iter().map(|r| r.qa.len()).sum(),
            n_images: self.images.len(),
            frames_per_clip: self.spec.frames_per_clip,
            canvas: [self.spec.canvas_height, self.spec.canvas_width],
            seed: self.spec.seed,
        }
    }

    /// Writes `manifest.jsonl`, `images.jsonl` (when there are images) and
    /// one VOFR file per clip under `frames/`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), MediaError> {
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(|source| MediaError::Io {
            path: frames.display().to_string(),
            source,
        })?;
        write_all(&dir.join("manifest.jsonl"), self.manifest.to_jsonl().as_bytes())?;
        if !self.images.is_empty() {
            write_all(&dir.join("images.jsonl"), self.image_manifest.to_jsonl().as_bytes())?;
        }
        let records = self.manifest.records.iter().chain(&self.image_manifest.records);
        for (clip, r) in self.clips.iter().chain(&self.images).zip(records) {
            write_vofr(&dir.join(&r.frames_path), clip)?;
        }
        Ok(())
    }
}

struct Layout<'a> {
    spec: &'a SyntheticSpec,
}

impl Layout<'_> {
    fn object(&self, rng: &mut StreamRng, color: &str, shape: Shape, y: usize, event: Option<EventKind>, span: (usize, usize)) -> ObjectTrack {
        let spec = self.spec;
        let (w, s) = (spec.canvas_width, spec.shape_size);
        let steps = span.1 - span.0 - 1;
        let room = w - s - 2;
        let (x_start, velocity) = match event {
            Some(EventKind::MovesLeft) | Some(EventKind::MovesRight) => {
                let speed = (room / steps.max(1)).clamp(1, 3);
                let travel = speed * steps;
                let lo = 1;
                let hi = 1 + room - travel;
                let left_edge = rng.random_range(lo..=hi);
                if event == Some(EventKind::MovesRight) {
                    (left_edge, speed as isize)
                } else {
                    (left_edge + travel, -(speed as isize))
                }
            }
            _ => (rng.random_range(1..=1 + room), 0),
        };
        ObjectTrack {
            color: color.to_string(),
            shape,
            y,
            event,
            span,
            x_start,
            velocity,
            switch: span.0 + (span.1 - span.0) / 2,
        }
    }

    /// Two distinct (color, shape) pairs differing in both attributes.
    fn two_identities(&self, rng: &mut StreamRng) -> [(String, Shape); 2] {
        let mut colors = self.spec.colors.clone();
        colors.shuffle(rng);
        let mut shapes = self.spec.shapes.clone();
        shapes.shuffle(rng);
        [(colors[0].clone(), shapes[0]), (colors[1].clone(), shapes[1])]
    }

    fn rows(&self, rng: &mut StreamRng) -> [usize; 2] {
        let (h, s) = (self.spec.canvas_height, self.spec.shape_size);
        let top = rng.random_range(1..=h / 2 - s);
        let bottom = rng.random_range(h / 2..=h - s - 1);
        if rng.random_bool(0.5) {
            [top, bottom]
        } else {
            [bottom, top]
        }
    }

    fn clip_script(&self, rng: &mut StreamRng) -> EventScript {
        let spec = self.spec;
        let t = spec.frames_per_clip;
        let two = rng.random_bool(spec.two_event_fraction);
        let objects = if two {
            let ids = self.two_identities(rng);
            let rows = self.rows(rng);
            let half = t / 2;
            let first = *spec.events.choose(rng).expect("events");
            let second = *spec.events.choose(rng).expect("events");
            vec![
                self.object(rng, &ids[0].0, ids[0].1, rows[0], Some(first), (0, half)),
                self.object(rng, &ids[1].0, ids[1].1, rows[1], Some(second), (half, t)),
            ]
        } else {
            let color = spec.colors.choose(rng).expect("colors").clone();
            let shape = *spec.shapes.choose(rng).expect("shapes");
            let y = rng.random_range(1..=spec.canvas_height - spec.shape_size - 1);
            let event = *spec.events.choose(rng).expect("events");
            vec![self.object(rng, &color, shape, y, Some(event), (0, t))]
        };
        EventScript {
            frames: t,
            height: spec.canvas_height,
            width: spec.canvas_width,
            shape_size: spec.shape_size,
            objects,
        }
    }

    fn image_script(&self, rng: &mut StreamRng) -> EventScript {
        let spec = self.spec;
        let objects = if rng.random_bool(0.5) {
            let ids = self.two_identities(rng);
            let rows = self.rows(rng);
            vec![
                self.object(rng, &ids[0].0, ids[0].1, rows[0], None, (0, 1)),
                self.object(rng, &ids[1].0, ids[1].1, rows[1], None, (0, 1)),
            ]
        } else {
            let color = spec.colors.choose(rng).expect("colors").clone();
            let shape = *spec.shapes.choose(rng).expect("shapes");
            let y = rng.random_range(1..=spec.canvas_height - spec.shape_size - 1);
            vec![self.object(rng, &color, shape, y, None, (0, 1))]
        };
        EventScript {
            frames: 1,
            height: spec.canvas_height,
            width: spec.canvas_width,
            shape_size: spec.shape_size,
            objects,
        }
    }

    fn qa(&self, rng: &mut StreamRng, script: &EventScript) -> QaPair {
        let o = script.objects.choose(rng).expect("objects");
        let ask_color = rng.random_bool(0.5);
        match o.event {
            Some(event) if !ask_color => QaPair {
                question: format!("what does the {} {} do ?", o.color, o.shape.name()),
                answer: event.phrase().to_string(),
            },
            _ => QaPair {
                question: format!("what color is the {} ?", o.shape.name()),
                answer: o.color.clone(),
            },
        }
    }
}

pub fn clip_frames_path(clip_id: &str) -> String {
    format!("frames/{clip_id}.vofr")
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus, MediaError> {
    spec.validate()?;
    let layout = Layout { spec };
    let rgb = |c: &str| spec.rgb(c);
    let mut clips = Vec::with_capacity(spec.n_clips);
    let mut scripts = Vec::with_capacity(spec.n_clips);
    let mut records = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let mut rng = stream(spec.seed, "synth-clip", i as u64);
        let script = layout.clip_script(&mut rng);
        let clip_id = format!("clip_{i:05}");
        let qa = if rng.random_bool(spec.qa_fraction) {
            vec![layout.qa(&mut rng, &script)]
        } else {
            vec![]
        };
        records.push(ManifestRecord {
            frames_path: clip_frames_path(&clip_id),
            captions: vec![script.caption()],
            qa,
            clip_id: clip_id.clone(),
        });
        clips.push(script.render(rgb, &clip_id));
        scripts.push(script);
    }
    let mut images = Vec::with_capacity(spec.n_images);
    let mut image_scripts = Vec::with_capacity(spec.n_images);
    let mut image_records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let mut rng = stream(spec.seed, "synth-image", i as u64);
        let script = layout.image_script(&mut rng);
        let clip_id = format!("img_{i:05}");
        image_records.push(ManifestRecord {
            frames_path: clip_frames_path(&clip_id),
            captions: vec![script.caption()],
            qa: vec![],
            clip_id: clip_id.clone(),
        });
        images.push(script.render(rgb, &clip_id));
        image_scripts.push(script);
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        clips,
        scripts,
        manifest: DatasetManifest::new(records)?,
        images,
        image_scripts,
        image_manifest: DatasetManifest::new(image_records)?,
    })
}
