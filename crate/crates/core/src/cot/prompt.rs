//! Text serialization of observations, goal sentences and answers.

use serde::{Deserialize, Serialize};

use crate::dataset::{Homography, ObservationWindow};
use crate::error::{Error, Result};
use crate::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordFrame {
    /// World meters.
    World,
    /// Scene-image pixels.
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Decimal places of world coordinates in the question.
    pub question_decimals: usize,
    /// Decimal places of world coordinates in the answer.
    pub answer_decimals: usize,
    pub cot_frame: CoordFrame,
    pub cot_decimals: usize,
    /// Nearest neighbours listed in the question; `None` lists all.
    #[serde(default)]
    pub max_neighbors: Option<usize>,
}

impl Default for PromptConfig {
    /// Integer pixel goals in the goal sentence, centimeter world coordinates elsewhere.
    fn default() -> Self {
        Self {
            question_decimals: 2,
            answer_decimals: 2,
            cot_frame: CoordFrame::Pixel,
            cot_decimals: 0,
            max_neighbors: None,
        }
    }
}

impl PromptConfig {
    /// Short prompts for the toy model: decimeter world coordinates everywhere, so the
    /// goal sentence and the answer's last point share one spelling, and one neighbour.
    pub fn desk() -> Self {
        Self {
            question_decimals: 1,
            answer_decimals: 1,
            cot_frame: CoordFrame::World,
            cot_decimals: 1,
            max_neighbors: Some(1),
        }
    }
}

/// Fixed-precision decimal with no negative zero.
pub fn format_number(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn quantize(v: f64, decimals: usize) -> f64 {
    format_number(v, decimals).parse().expect("formatted number parses")
}

pub fn format_pair(p: Vec2, decimals: usize) -> String {
    format!("({}, {})", format_number(p[0], decimals), format_number(p[1], decimals))
}

pub fn format_pairs(points: &[Vec2], decimals: usize) -> String {
    points
        .iter()
        .map(|&p| format_pair(p, decimals))
        .collect::<Vec<_>>()
        .join(", ")
}

fn decode_err(reason: impl Into<String>, raw: &str) -> Error {
    Error::DecodeFailure {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Self { s, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(decode_err(format!("expected {lit:?} at byte {}", self.pos), self.s))
        }
    }

    fn skip_spaces(&mut self) {
        while self.rest().starts_with(' ') {
            self.pos += 1;
        }
    }

    fn number(&mut self) -> Result<f64> {
        let rest = self.rest();
        let len = rest
            .char_indices()
            .take_while(|&(i, c)| c.is_ascii_digit() || c == '.' || (i == 0 && c == '-'))
            .count();
        let text = &rest[..len];
        let v: f64 = text
            .parse()
            .map_err(|_| decode_err(format!("expected a number at byte {}", self.pos), self.s))?;
        if !v.is_finite() {
            return Err(decode_err("non-finite number", self.s));
        }
        self.pos += len;
        Ok(v)
    }

    fn integer(&mut self) -> Result<usize> {
        let len = self.rest().chars().take_while(|c| c.is_ascii_digit()).count();
        let v = self.rest()[..len]
            .parse()
            .map_err(|_| decode_err(format!("expected an integer at byte {}", self.pos), self.s))?;
        self.pos += len;
        Ok(v)
    }

    /// `(x, y)` with optional spaces inside.
    fn pair(&mut self) -> Result<Vec2> {
        self.expect("(")?;
        self.skip_spaces();
        let x = self.number()?;
        self.skip_spaces();
        self.expect(",")?;
        self.skip_spaces();
        let y = self.number()?;
        self.skip_spaces();
        self.expect(")")?;
        Ok([x, y])
    }

    /// One or more pairs separated by commas.
    fn pairs(&mut self) -> Result<Vec<Vec2>> {
        let mut out = vec![self.pair()?];
        loop {
            let save = self.pos;
            self.skip_spaces();
            if self.eat(",") {
                self.skip_spaces();
                if self.rest().starts_with('(') {
                    out.push(self.pair()?);
                    continue;
                }
                return Err(decode_err(format!("dangling comma at byte {save}"), self.s));
            }
            self.pos = save;
            return Ok(out);
        }
    }
}

/// Parses a comma-separated list of `(x, y)` pairs and nothing else.
pub fn parse_pairs(text: &str) -> Result<Vec<Vec2>> {
    let mut c = Cursor::new(text.trim());
    let out = c.pairs()?;
    if !c.rest().is_empty() {
        return Err(decode_err(format!("trailing text {:?}", c.rest()), text));
    }
    Ok(out)
}

/// Parses an answer into exactly `pred_len` points.
pub fn parse_answer(text: &str, pred_len: usize) -> Result<Vec<Vec2>> {
    let pts = parse_pairs(text)?;
    if pts.len() != pred_len {
        return Err(decode_err(
            format!("expected {pred_len} coordinate pairs, found {}", pts.len()),
            text,
        ));
    }
    Ok(pts)
}

pub fn answer_text(future: &[Vec2], decimals: usize) -> String {
    format_pairs(future, decimals)
}

/// "Pedestrian {i} will arrive at coordinate ({x}, {y}) after the next {tau} frames."
pub fn make_cot_sentence(i: usize, goal: Vec2, tau_pred: usize, decimals: usize) -> String {
    format!(
        "Pedestrian {i} will arrive at coordinate {} after the next {tau_pred} frames.",
        format_pair(goal, decimals)
    )
}

/// Inverse of [`make_cot_sentence`]: `(i, goal, tau_pred)`.
pub fn parse_cot_sentence(text: &str) -> Result<(usize, Vec2, usize)> {
    let mut c = Cursor::new(text);
    c.expect("Pedestrian ")?;
    let i = c.integer()?;
    c.expect(" will arrive at coordinate ")?;
    let goal = c.pair()?;
    c.expect(" after the next ")?;
    let tau = c.integer()?;
    c.expect(" frames.")?;
    if !c.rest().is_empty() {
        return Err(decode_err("trailing text after the goal sentence", text));
    }
    Ok((i, goal, tau))
}

/// Goal expressed in the goal sentence's frame.
pub fn cot_point(goal_world: Vec2, homography: &Homography, cfg: &PromptConfig) -> Result<Vec2> {
    match cfg.cot_frame {
        CoordFrame::World => Ok(goal_world),
        CoordFrame::Pixel => homography.world_to_pixel(goal_world),
    }
}

/// Inverse of [`cot_point`].
pub fn cot_point_to_world(p: Vec2, homography: &Homography, cfg: &PromptConfig) -> Result<Vec2> {
    match cfg.cot_frame {
        CoordFrame::World => Ok(p),
        CoordFrame::Pixel => homography.pixel_to_world(p),
    }
}

/// Indices of the neighbours listed for pedestrian `i`: nearest current position first.
pub fn listed_neighbors(window: &ObservationWindow, i: usize, cap: Option<usize>) -> Vec<usize> {
    let me = window.current_position(i);
    let mut others: Vec<(f64, usize)> = (0..window.num_pedestrians())
        .filter(|&j| j != i)
        .map(|j| {
            let p = window.current_position(j);
            ((p[0] - me[0]).hypot(p[1] - me[1]), j)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = cap.unwrap_or(usize::MAX).min(others.len());
    others[..n].iter().map(|&(_, j)| j).collect()
}

/// "Pedestrian {i}: (x, y), .... Pedestrian {j}: .... Where will pedestrian {i} be in the next {tau} frames?"
///
/// The target comes first, then its listed neighbours. Indices are window-local.
pub fn serialize_observation(window: &ObservationWindow, i: usize, cfg: &PromptConfig) -> String {
    let mut parts = Vec::new();
    let mut order = vec![i];
    order.extend(listed_neighbors(window, i, cfg.max_neighbors));
    for j in order {
        parts.push(format!(
            "Pedestrian {j}: {}.",
            format_pairs(&window.past[j], cfg.question_decimals)
        ));
    }
    parts.push(format!(
        "Where will pedestrian {i} be in the next {} frames?",
        window.pred_len()
    ));
    parts.join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuestion {
    pub target: usize,
    pub tau_pred: usize,
    /// `(window index, past trajectory)`, target first.
    pub pedestrians: Vec<(usize, Vec<Vec2>)>,
}

pub fn parse_question(text: &str) -> Result<ParsedQuestion> {
    let mut c = Cursor::new(text);
    let mut pedestrians = Vec::new();
    while c.eat("Pedestrian ") {
        let j = c.integer()?;
        c.expect(": ")?;
        let pts = c.pairs()?;
        c.expect(". ")?;
        pedestrians.push((j, pts));
    }
    c.expect("Where will pedestrian ")?;
    let target = c.integer()?;
    c.expect(" be in the next ")?;
    let tau_pred = c.integer()?;
    c.expect(" frames?")?;
    if !c.rest().is_empty() || pedestrians.is_empty() || pedestrians[0].0 != target {
        return Err(decode_err("malformed question", text));
    }
    Ok(ParsedQuestion {
        target,
        tau_pred,
        pedestrians,
    })
}

/// Question, goal sentence and answer for one pedestrian of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub question: String,
    pub cot: String,
    pub answer: String,
}

impl PromptDocument {
    /// Builds the training document; the goal sentence states the ground-truth final position.
    pub fn from_ground_truth(
        window: &ObservationWindow,
        i: usize,
        homography: &Homography,
        cfg: &PromptConfig,
    ) -> Result<Self> {
        let goal = cot_point(window.final_position(i), homography, cfg)?;
        Ok(Self {
            question: serialize_observation(window, i, cfg),
            cot: make_cot_sentence(i, goal, window.pred_len(), cfg.cot_decimals),
            answer: answer_text(&window.future[i], cfg.answer_decimals),
        })
    }

    /// Encoder input: question followed by the goal sentence.
    pub fn source(&self) -> String {
        source_text(&self.question, &self.cot)
    }
}

pub fn source_text(question: &str, cot: &str) -> String {
    format!("{question} {cot}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(n: usize) -> ObservationWindow {
        ObservationWindow {
            scene_id: "s".into(),
            anchor_frame: 7,
            pedestrian_ids: (0..n as i64).collect(),
            past: (0..n)
                .map(|j| (0..8).map(|t| [t as f64 + j as f64 * 3.0, -(j as f64) * 1.25]).collect())
                .collect(),
            future: (0..n)
                .map(|j| (0..12).map(|t| [8.0 + t as f64, j as f64 * 0.5]).collect())
                .collect(),
        }
    }

    #[test]
    fn caption_style_sentence() {
        assert_eq!(
            make_cot_sentence(0, [57.0, 95.0], 12, 0),
            "Pedestrian 0 will arrive at coordinate (57, 95) after the next 12 frames."
        );
        assert_eq!(
            make_cot_sentence(3, [1.0, 2.0], 1, 0),
            "Pedestrian 3 will arrive at coordinate (1, 2) after the next 1 frames."
        );
    }

    #[test]
    fn no_negative_zero() {
        assert_eq!(format_number(-0.004, 2), "0.00");
        assert_eq!(format_number(-0.4, 0), "0");
        assert_eq!(format_number(-0.6, 0), "-1");
        assert_eq!(format_number(2.345, 1), "2.3");
    }

    #[test]
    fn single_pedestrian_question() {
        let w = window(1);
        let q = serialize_observation(&w, 0, &PromptConfig::default());
        assert_eq!(q.matches('(').count(), 8);
        assert!(q.starts_with("Pedestrian 0: (0.00, 0.00), (1.00, 0.00)"));
        assert!(q.ends_with("(7.00, 0.00). Where will pedestrian 0 be in the next 12 frames?"));
    }

    #[test]
    fn question_round_trip_and_neighbor_cap() {
        let w = window(4);
        let cfg = PromptConfig::default();
        let q = serialize_observation(&w, 2, &cfg);
        let p = parse_question(&q).unwrap();
        assert_eq!(p.target, 2);
        assert_eq!(p.tau_pred, 12);
        assert_eq!(p.pedestrians.len(), 4);
        assert_eq!(p.pedestrians[0].1, w.past[2]);
        let capped = PromptConfig {
            max_neighbors: Some(1),
            ..cfg
        };
        let p = parse_question(&serialize_observation(&w, 2, &capped)).unwrap();
        let listed: Vec<usize> = p.pedestrians.iter().map(|(j, _)| *j).collect();
        // Neighbours 1 and 3 are equally far; the lower index wins.
        assert_eq!(listed, vec![2, 1]);
    }

    #[test]
    fn one_digit_changes_the_text() {
        let a = window(2);
        let mut b = a.clone();
        b.past[1][3][0] += 0.01;
        let cfg = PromptConfig::default();
        assert_ne!(serialize_observation(&a, 0, &cfg), serialize_observation(&b, 0, &cfg));
    }

    #[test]
    fn broken_answers() {
        assert!(matches!(parse_answer("(1,2)(3", 2), Err(Error::DecodeFailure { .. })));
        let eleven = format_pairs(&vec![[1.0, 2.0]; 11], 1);
        match parse_answer(&eleven, 12) {
            Err(Error::DecodeFailure { raw, .. }) => assert_eq!(raw, eleven),
            other => panic!("{other:?}"),
        }
        assert!(parse_answer("(1.0, 2.0), ", 1).is_err());
        assert!(parse_answer("(a, 2)", 1).is_err());
        assert_eq!(parse_answer("(1.5,-2)", 1).unwrap(), vec![[1.5, -2.0]]);
    }

    #[test]
    fn document_from_ground_truth() {
        let w = window(2);
        let h = Homography::metric_top_down(4.0, 64.0).unwrap();
        let doc = PromptDocument::from_ground_truth(&w, 1, &h, &PromptConfig::default()).unwrap();
        // Final world (19, 0.5) -> pixel (76, 62).
        assert_eq!(doc.cot, "Pedestrian 1 will arrive at coordinate (76, 62) after the next 12 frames.");
        assert_eq!(parse_answer(&doc.answer, 12).unwrap(), w.future[1]);
        assert!(doc.source().starts_with(&doc.question));
        assert!(doc.source().ends_with(&doc.cot));
    }

    proptest! {
        #[test]
        fn cot_round_trip(i in 0usize..100, x in -500.0f64..500.0, y in -500.0f64..500.0, tau in 1usize..40, d in 0usize..3) {
            let s = make_cot_sentence(i, [x, y], tau, d);
            let (pi, g, pt) = parse_cot_sentence(&s).unwrap();
            prop_assert_eq!(pi, i);
            prop_assert_eq!(pt, tau);
            prop_assert_eq!(g, [quantize(x, d), quantize(y, d)]);
        }

        #[test]
        fn answer_round_trip(pts in proptest::collection::vec((-99.0f64..99.0, -99.0f64..99.0), 1..15), d in 0usize..4) {
            let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let back = parse_answer(&answer_text(&pts, d), pts.len()).unwrap();
            let want: Vec<Vec2> = pts.iter().map(|p| [quantize(p[0], d), quantize(p[1], d)]).collect();
            prop_assert_eq!(back, want);
        }
    }
}
