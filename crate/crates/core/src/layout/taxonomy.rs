//! Category taxonomy. Declaration order of each list fixes channel indices.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LayoutError;

/// Category id as stored in 8-bit indexed segmentation maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u8);

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Which block of the taxonomy a category belongs to, with its channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Foreground(usize),
    Background(usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyFile {
    name: String,
    foreground: Vec<Category>,
    background: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    name: String,
    foreground: Vec<Category>,
    background: Vec<Category>,
    slots: Vec<Option<Slot>>,
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = LayoutError;
    fn try_from(f: TaxonomyFile) -> Result<Self, LayoutError> {
        Taxonomy::new(f.name, f.foreground, f.background)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        TaxonomyFile {
            name: t.name,
            foreground: t.foreground,
            background: t.background,
        }
    }
}

impl Taxonomy {
    pub fn new(name: impl Into<String>, foreground: Vec<Category>, background: Vec<Category>) -> Result<Self, LayoutError> {
        let mut slots = vec![None; 256];
        let tagged = foreground
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, Slot::Foreground(i)))
            .chain(background.iter().enumerate().map(|(i, c)| (c.id, Slot::Background(i))));
        for (id, slot) in tagged {
            let entry = &mut slots[id.0 as usize];
            if entry.is_some() {
                return Err(LayoutError::Taxonomy(format!("duplicate category id {id}")));
            }
            *entry = Some(slot);
        }
        Ok(Self {
            name: name.into(),
            foreground,
            background,
            slots,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LayoutError> {
        let text = std::fs::read_to_string(path).map_err(|e| LayoutError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LayoutError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn foreground(&self) -> &[Category] {
        &self.foreground
    }

    pub fn background(&self) -> &[Category] {
        &self.background
    }

    /// Number of foreground categories.
    pub fn c_o(&self) -> usize {
        self.foreground.len()
    }

    /// Number of background categories.
    pub fn c_b(&self) -> usize {
        self.background.len()
    }

    pub fn slot(&self, id: CategoryId) -> Option<Slot> {
        self.slots[id.0 as usize]
    }

    pub fn foreground_index(&self, id: CategoryId) -> Option<usize> {
        match self.slot(id) {
            Some(Slot::Foreground(i)) => Some(i),
            _ => None,
        }
    }

    pub fn background_index(&self, id: CategoryId) -> Option<usize> {
        match self.slot(id) {
            Some(Slot::Background(i)) => Some(i),
            _ => None,
        }
    }

    pub fn category(&self, id: CategoryId) -> Option<&Category> {
        match self.slot(id)? {
            Slot::Foreground(i) => self.foreground.get(i),
            Slot::Background(i) => self.background.get(i),
        }
    }

    /// Ids of all categories, background block first (composed-map channel order).
    pub fn composed_order(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.background.iter().chain(&self.foreground).map(|c| c.id)
    }

    /// Street-scene preset: ids follow the Cityscapes label ids, 1..=23 are
    /// background and 24..=33 the instance (foreground) classes.
    pub fn cityscapes() -> Self {
        const BACKGROUND: [&str; 23] = [
            "ego vehicle",
            "rectification border",
            "out of roi",
            "static",
            "dynamic",
            "ground",
            "road",
            "sidewalk",
            "parking",
            "rail track",
            "building",
            "wall",
            "fence",
            "guard rail",
            "bridge",
            "tunnel",
            "pole",
            "polegroup",
            "traffic light",
            "traffic sign",
            "vegetation",
            "terrain",
            "sky",
        ];
        const FOREGROUND: [&str; 10] = [
            "person",
            "rider",
            "car",
            "truck",
            "bus",
            "caravan",
            "trailer",
            "train",
            "motorcycle",
            "bicycle",
        ];
        let background = numbered(&BACKGROUND, 1);
        let foreground = numbered(&FOREGROUND, 24);
        Self::new("cityscapes", foreground, background).expect("preset ids are unique")
    }

    /// Scene-parsing preset over the 150 ADE20K classes (ids 1..=150): 35
    /// stuff-like classes form the background, the remaining 115 the foreground.
    pub fn ade20k() -> Self {
        const BACKGROUND: [u8; 35] = [
            1, 2, 3, 4, 5, 6, 7, 10, 12, 14, 17, 18, 22, 26, 27, 30, 33, 35, 39, 47, 49, 53, 54, 55, 60, 61, 62, 69, 92, 95, 102, 110, 114,
            129, 141,
        ];
        let (mut foreground, mut background) = (Vec::new(), Vec::new());
        for (i, name) in ADE20K_NAMES.iter().enumerate() {
            let id = CategoryId(i as u8 + 1);
            let c = Category {
                id,
                name: (*name).to_string(),
            };
            if BACKGROUND.contains(&id.0) {
                background.push(c);
            } else {
                foreground.push(c);
            }
        }
        Self::new("ade20k", foreground, background).expect("preset ids are unique")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "cityscapes" => Some(Self::cityscapes()),
            "ade20k" => Some(Self::ade20k()),
            _ => None,
        }
    }
}

fn numbered(names: &[&str], first: u8) -> Vec<Category> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| Category {
            id: CategoryId(first + i as u8),
            name: (*n).to_string(),
        })
        .collect()
}

const ADE20K_NAMES: [&str; 150] = [
    "wall",
    "building",
    "sky",
    "floor",
    "tree",
    "ceiling",
    "road",
    "bed",
    "windowpane",
    "grass",
    "cabinet",
    "sidewalk",
    "person",
    "earth",
    "door",
    "table",
    "mountain",
    "plant",
    "curtain",
    "chair",
    "car",
    "water",
    "painting",
    "sofa",
    "shelf",
    "house",
    "sea",
    "mirror",
    "rug",
    "field",
    "armchair",
    "seat",
    "fence",
    "desk",
    "rock",
    "wardrobe",
    "lamp",
    "bathtub",
    "railing",
    "cushion",
    "base",
    "box",
    "column",
    "signboard",
    "chest of drawers",
    "counter",
    "sand",
    "sink",
    "skyscraper",
    "fireplace",
    "refrigerator",
    "grandstand",
    "path",
    "stairs",
    "runway",
    "case",
    "pool table",
    "pillow",
    "screen door",
    "stairway",
    "river",
    "bridge",
    "bookcase",
    "blind",
    "coffee table",
    "toilet",
    "flower",
    "book",
    "hill",
    "bench",
    "countertop",
    "stove",
    "palm",
    "kitchen island",
    "computer",
    "swivel chair",
    "boat",
    "bar",
    "arcade machine",
    "hovel",
    "bus",
    "towel",
    "light",
    "truck",
    "tower",
    "chandelier",
    "awning",
    "streetlight",
    "booth",
    "television receiver",
    "airplane",
    "dirt track",
    "apparel",
    "pole",
    "land",
    "bannister",
    "escalator",
    "ottoman",
    "bottle",
    "buffet",
    "poster",
    "stage",
    "van",
    "ship",
    "fountain",
    "conveyer belt",
    "canopy",
    "washer",
    "plaything",
    "swimming pool",
    "stool",
    "barrel",
    "basket",
    "waterfall",
    "tent",
    "bag",
    "minibike",
    "cradle",
    "oven",
    "ball",
    "food",
    "step",
    "tank",
    "trade name",
    "microwave",
    "pot",
    "animal",
    "bicycle",
    "lake",
    "dishwasher",
    "screen",
    "blanket",
    "sculpture",
    "hood",
    "sconce",
    "vase",
    "traffic light",
    "tray",
    "ashcan",
    "fan",
    "pier",
    "crt screen",
    "plate",
    "monitor",
    "bulletin board",
    "shower",
    "radiator",
    "glass",
    "clock",
    "flag",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_sizes() {
        let c = Taxonomy::cityscapes();
        assert_eq!((c.c_o(), c.c_b()), (10, 23));
        let a = Taxonomy::ade20k();
        assert_eq!((a.c_o(), a.c_b()), (115, 35));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let cat = |id| Category {
            id: CategoryId(id),
            name: format!("c{id}"),
        };
        assert!(Taxonomy::new("t", vec![cat(1)], vec![cat(1)]).is_err());
        assert!(Taxonomy::new("t", vec![cat(1), cat(2)], vec![cat(3)]).is_ok());
    }

    #[test]
    fn slots_follow_declaration_order() {
        let c = Taxonomy::cityscapes();
        assert_eq!(c.foreground_index(CategoryId(26)), Some(2));
        assert_eq!(c.background_index(CategoryId(7)), Some(6));
        assert_eq!(c.foreground_index(CategoryId(7)), None);
        assert_eq!(c.slot(CategoryId(0)), None);
        assert_eq!(c.category(CategoryId(26)).unwrap().name, "car");
    }

    #[test]
    fn json_round_trip_rebuilds_slots() {
        let c = Taxonomy::cityscapes();
        let back: Taxonomy = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let bad = r#"{"name":"x","foreground":[{"id":1,"name":"a"}],"background":[{"id":1,"name":"b"}]}"#;
        assert!(serde_json::from_str::<Taxonomy>(bad).is_err());
    }
}
