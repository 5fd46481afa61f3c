use super::config::{parse_config_str, ConfigError, RunConfig};

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub text: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "three-archetypes",
        description: "12 devices, 4 per single-label archetype {0}, {1}, {2}; synthetic blobs",
        text: include_str!("../../presets/three-archetypes.conf"),
    },
    Preset {
        name: "grouped-archetypes",
        description: "12 devices, 4 per archetype {0,1,2,3}, {4,5,6}, {7,8,9}; synthetic blobs",
        text: include_str!("../../presets/grouped-archetypes.conf"),
    },
];

pub fn load_preset(name: &str) -> Option<Result<RunConfig, ConfigError>> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .map(|p| parse_config_str(p.text, None))
}
