use serde::{Deserialize, Serialize};

use super::PlaceholderPolicy;

/// Token layout.
///
/// Text tokens (the action space) occupy `[0, text_region_end)`: the digits
/// first, so digit `d` has id `d`, then the answer tags and, for multi-turn
/// tasks, the look command. Control tokens live in
/// `[text_region_end, vocab_size)` and are never produced by the actor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_digits: u32,
    pub with_look: bool,
}

impl Vocab {
    pub fn new(num_digits: u32, with_look: bool) -> Self {
        assert!(num_digits > 0, "vocabulary needs at least one digit");
        Self {
            num_digits,
            with_look,
        }
    }

    pub fn digit(&self, d: u32) -> Option<u32> {
        (d < self.num_digits).then_some(d)
    }

    pub fn as_digit(&self, id: u32) -> Option<u32> {
        (id < self.num_digits).then_some(id)
    }

    pub fn answer_open(&self) -> u32 {
        self.num_digits
    }

    pub fn answer_close(&self) -> u32 {
        self.num_digits + 1
    }

    pub fn look(&self) -> Option<u32> {
        self.with_look.then_some(self.num_digits + 2)
    }

    pub fn text_region_end(&self) -> u32 {
        self.num_digits + if self.with_look { 3 } else { 2 }
    }

    pub fn query(&self) -> u32 {
        self.text_region_end()
    }

    pub fn invalid(&self) -> u32 {
        self.text_region_end() + 1
    }

    pub fn obs_start(&self) -> u32 {
        self.text_region_end() + 2
    }

    pub fn obs_end(&self) -> u32 {
        self.text_region_end() + 3
    }

    pub fn placeholder(&self) -> u32 {
        self.text_region_end() + 4
    }

    pub fn pad(&self) -> u32 {
        self.text_region_end() + 5
    }

    pub fn vocab_size(&self) -> u32 {
        self.text_region_end() + 6
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.text_region_end()
    }

    pub fn placeholder_policy(&self, max_height: usize, max_width: usize) -> PlaceholderPolicy {
        PlaceholderPolicy {
            obs_start: self.obs_start(),
            obs_end: self.obs_end(),
            placeholder: self.placeholder(),
            max_height,
            max_width,
        }
    }

    pub fn name(&self, id: u32) -> String {
        if id < self.num_digits {
            return id.to_string();
        }
        let name = match id {
            x if x == self.answer_open() => "<answer>",
            x if x == self.answer_close() => "</answer>",
            x if Some(x) == self.look() => "<look>",
            x if x == self.query() => "<q>",
            x if x == self.invalid() => "<invalid>",
            x if x == self.obs_start() => "<obs>",
            x if x == self.obs_end() => "</obs>",
            x if x == self.placeholder() => "<cell>",
            x if x == self.pad() => "<pad>",
            _ => return format!("<unk:{id}>"),
        };
        name.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_contiguous_and_disjoint() {
        for (digits, look) in [(10, false), (4, true), (1, true)] {
            let v = Vocab::new(digits, look);
            let mut ids: Vec<u32> = (0..digits).collect();
            ids.extend([v.answer_open(), v.answer_close()]);
            ids.extend(v.look());
            assert_eq!(ids.len() as u32, v.text_region_end());
            ids.extend([
                v.query(),
                v.invalid(),
                v.obs_start(),
                v.obs_end(),
                v.placeholder(),
                v.pad(),
            ]);
            let expected: Vec<u32> = (0..v.vocab_size()).collect();
            assert_eq!(ids, expected);
            assert!(ids.iter().all(|&i| !v.name(i).starts_with("<unk")));
        }
    }
}
