use serde::{Deserialize, Serialize};

/// Class labels shared by the classification-style tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Normal,
    Anomaly,
    Walk,
    Bike,
    Bus,
    Car,
    Stay,
    Move,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 8] = [
        ClassLabel::Normal,
        ClassLabel::Anomaly,
        ClassLabel::Walk,
        ClassLabel::Bike,
        ClassLabel::Bus,
        ClassLabel::Car,
        ClassLabel::Stay,
        ClassLabel::Move,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Cell(usize),
    Class(ClassLabel),
    Keep,
    Drop,
    Segment(usize),
    User(usize),
}

/// Output space shared by every model: grid cells, class labels,
/// keep/drop, segment slots and user slots, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub grid: usize,
    pub segment_slots: usize,
    pub user_slots: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { grid: 16, segment_slots: 32, user_slots: 16 }
    }
}

impl Vocab {
    pub fn new(grid: usize, segment_slots: usize, user_slots: usize) -> Self {
        Self { grid, segment_slots, user_slots }
    }

    fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn size(&self) -> usize {
        self.cells() + ClassLabel::ALL.len() + 2 + self.segment_slots + self.user_slots
    }

    /// Id of a token; out-of-range slots are folded modulo their range.
    pub fn id(&self, t: Token) -> usize {
        let base_class = self.cells();
        let base_kd = base_class + ClassLabel::ALL.len();
        let base_seg = base_kd + 2;
        let base_user = base_seg + self.segment_slots;
        match t {
            Token::Cell(c) => c % self.cells(),
            Token::Class(c) => base_class + c.index(),
            Token::Keep => base_kd,
            Token::Drop => base_kd + 1,
            Token::Segment(s) => base_seg + s % self.segment_slots,
            Token::User(u) => base_user + u % self.user_slots,
        }
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        let mut i = id;
        if i < self.cells() {
            return Some(Token::Cell(i));
        }
        i -= self.cells();
        if i < ClassLabel::ALL.len() {
            return Some(Token::Class(ClassLabel::ALL[i]));
        }
        i -= ClassLabel::ALL.len();
        match i {
            0 => return Some(Token::Keep),
            1 => return Some(Token::Drop),
            _ => {}
        }
        i -= 2;
        if i < self.segment_slots {
            return Some(Token::Segment(i));
        }
        i -= self.segment_slots;
        (i < self.user_slots).then_some(Token::User(i))
    }

    /// Grid cell of a normalized position in [0,1]^2, row-major by latitude.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let g = self.grid as f64;
        let cx = ((x * g).floor().max(0.0) as usize).min(self.grid - 1);
        let cy = ((y * g).floor().max(0.0) as usize).min(self.grid - 1);
        cy * self.grid + cx
    }

    /// Normalized centre of a grid cell.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let g = self.grid as f64;
        (((cell % self.grid) as f64 + 0.5) / g, ((cell / self.grid) as f64 + 0.5) / g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        let v = Vocab::default();
        assert_eq!(v.size(), 256 + 8 + 2 + 32 + 16);
        for id in 0..v.size() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert_eq!(v.token(v.size()), None);
    }

    #[test]
    fn cells() {
        let v = Vocab::default();
        assert_eq!(v.cell_of(0.0, 0.0), 0);
        assert_eq!(v.cell_of(1.0, 1.0), 255);
        assert_eq!(v.cell_of(0.99, 0.0), 15);
        let (x, y) = v.cell_center(17);
        assert_eq!(v.cell_of(x, y), 17);
    }
}
