//! Plain-text agent checkpoints.
//!
//! A checkpoint is a manifest followed by named sections:
//!
//! ```text
//! adinfohrl-checkpoint 1
//! section config <sha256> <line count>
//! ...
//! manifest-end
//! [config]
//! <section lines>
//! ...
//! ```
//!
//! Every section is checked against its digest and fully parsed before an
//! agent is built, so a damaged file never yields a partially restored agent.
//! Optimizer moments and buffer contents are not stored; a restored agent is
//! meant for evaluation and inspection.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::agent::{Agent, RngStreams};
use crate::config::{ExperimentConfig, Mode};
use crate::critic::TwinCritic;
use crate::envsim::make_env;
use crate::error::{Error, Result};
use crate::hpolicy::OptionPolicySet;
use crate::ndmath::{fmt_f64, DenseNet, LineReader};
use crate::optionnet::OptionNet;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "adinfohrl-checkpoint";
const SECTIONS: [&str; 6] = ["config", "progress", "rng", "critic", "policies", "option_net"];

fn digest(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

fn nets_text(nets: &[&DenseNet]) -> String {
    nets.iter().map(|n| n.to_text()).collect()
}

fn rng_line(name: &str, rng: &ChaCha8Rng) -> String {
    format!(
        "{name} {} {} {}\n",
        hex::encode(rng.get_seed()),
        rng.get_stream(),
        rng.get_word_pos()
    )
}

/// Serializes the agent's networks, configuration, progress and RNG states.
pub fn to_text(agent: &Agent) -> String {
    let mut bodies: Vec<(&str, String)> = Vec::new();
    bodies.push(("config", agent.config().to_toml_string()));
    bodies.push((
        "progress",
        format!("seed {}\nstep {}\n", agent.seed(), agent.step_count()),
    ));
    bodies.push((
        "rng",
        agent.rngs.named().iter().map(|(name, rng)| rng_line(name, rng)).collect(),
    ));
    let c = &agent.critic;
    bodies.push(("critic", nets_text(&[&c.q1, &c.q2, &c.q1_target, &c.q2_target])));
    let p = &agent.policies;
    let policy_nets: Vec<&DenseNet> = (0..p.option_count())
        .flat_map(|o| [p.policy(o), p.target(o)])
        .collect();
    bodies.push(("policies", nets_text(&policy_nets)));
    bodies.push((
        "option_net",
        match &agent.option_net {
            Some(net) => {
                let (shift, scale) = net.input_scaling();
                let row = |v: &[f64]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
                format!("{}input_shift {}\ninput_scale {}\n", net.net.to_text(), row(shift), row(scale))
            }
            None => "none\n".to_string(),
        },
    ));

    let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
    for (name, body) in &bodies {
        out.push_str(&format!("section {name} {} {}\n", digest(body), body.lines().count()));
    }
    out.push_str("manifest-end\n");
    for (name, body) in &bodies {
        out.push_str(&format!("[{name}]\n{body}"));
    }
    out
}

pub fn save(agent: &Agent, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(agent))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Agent> {
    from_text(&std::fs::read_to_string(path)?)
}

fn section_error(section: &str, reason: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        reason: reason.to_string(),
    }
}

/// Splits the document into verified section bodies, in manifest order.
fn split_sections(text: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut head = header.split_whitespace();
    if head.next() != Some(MAGIC) {
        return Err(section_error("manifest", "missing checkpoint header"));
    }
    let version: u32 = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| section_error("manifest", "missing format version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let mut manifest = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| section_error("manifest", "missing manifest-end"))?;
        if line == "manifest-end" {
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["section", name, hash, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| section_error("manifest", format!("bad line count for `{name}`")))?;
                manifest.push((name.to_string(), hash.to_string(), count));
            }
            _ => return Err(section_error("manifest", format!("malformed entry `{line}`"))),
        }
    }
    let names: Vec<&str> = manifest.iter().map(|(n, _, _)| n.as_str()).collect();
    if names != SECTIONS {
        return Err(section_error("manifest", format!("unexpected sections {names:?}")));
    }

    let mut out = Vec::new();
    for (name, hash, count) in manifest {
        if lines.next() != Some(format!("[{name}]").as_str()) {
            return Err(section_error(&name, "section header missing"));
        }
        let mut body = String::new();
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| section_error(&name, "section is truncated"))?;
            body.push_str(line);
            body.push('\n');
        }
        if digest(&body) != hash {
            return Err(section_error(&name, "digest mismatch"));
        }
        out.push((name, body));
    }
    if lines.next().is_some() {
        return Err(section_error("manifest", "trailing data after the last section"));
    }
    Ok(out)
}

/// Parses consecutive network documents, each closed by an `end` line.
fn parse_nets(section: &str, body: &str) -> Result<Vec<DenseNet>> {
    let mut nets = Vec::new();
    let mut current = String::new();
    for line in body.lines() {
        current.push_str(line);
        current.push('\n');
        if line.trim() == "end" {
            nets.push(DenseNet::from_text(&current).map_err(|e| section_error(section, e))?);
            current.clear();
        }
    }
    if !current.trim().is_empty() {
        return Err(section_error(section, "trailing partial network"));
    }
    Ok(nets)
}

fn parse_rng(body: &str) -> Result<RngStreams> {
    let mut streams = RngStreams::new(0);
    let mut reader = LineReader::new(body);
    for (name, rng) in streams.named_mut() {
        let parse = |reader: &mut LineReader| -> Result<ChaCha8Rng> {
            let tokens = reader.expect_keyword(name)?;
            let [seed, stream, word_pos] = tokens.as_slice() else {
                return Err(reader.error("expected seed, stream and word position"));
            };
            let bytes = hex::decode(seed).map_err(|e| reader.error(e.to_string()))?;
            let seed: [u8; 32] = bytes
                .try_into()
                .map_err(|_| reader.error("seed must be 32 bytes"))?;
            let stream: u64 = reader.parse_one(&[stream])?;
            let word_pos: u128 = reader.parse_one(&[word_pos])?;
            let mut restored = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            restored.set_stream(stream);
            restored.set_word_pos(word_pos);
            Ok(restored)
        };
        *rng = parse(&mut reader).map_err(|e| section_error("rng", e))?;
    }
    Ok(streams)
}

fn parse_progress(body: &str) -> Result<(u64, u64)> {
    let mut reader = LineReader::new(body);
    let seed_tokens = reader.expect_keyword("seed")?;
    let seed = reader.parse_one(&seed_tokens)?;
    let step_tokens = reader.expect_keyword("step")?;
    let step = reader.parse_one(&step_tokens)?;
    Ok((seed, step))
}

fn parse_scaling(body: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = LineReader::new(body);
    let shift_tokens = reader.expect_keyword("input_shift")?;
    let shift = reader.parse_all(&shift_tokens)?;
    let scale_tokens = reader.expect_keyword("input_scale")?;
    let scale = reader.parse_all(&scale_tokens)?;
    Ok((shift, scale))
}

pub fn from_text(text: &str) -> Result<Agent> {
    let sections = split_sections(text)?;
    let body = |name: &str| {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_str())
            .expect("manifest lists every section")
    };

    let config = ExperimentConfig::from_toml_str(body("config")).map_err(|e| section_error("config", e))?;
    let spec = make_env(&config.env_name, &config.task_params())
        .map_err(|e| section_error("config", e))?
        .spec()
        .clone();
    let (seed, step) = parse_progress(body("progress")).map_err(|e| section_error("progress", e))?;
    let rngs = parse_rng(body("rng"))?;

    let critic_nets: [DenseNet; 4] = parse_nets("critic", body("critic"))?
        .try_into()
        .map_err(|v: Vec<DenseNet>| section_error("critic", format!("expected 4 networks, found {}", v.len())))?;
    let critic = TwinCritic::from_nets(critic_nets, spec.state_dim, spec.action_dim, config.critic_lr)
        .map_err(|e| section_error("critic", e))?;

    let options = config.effective_option_count();
    let policy_nets = parse_nets("policies", body("policies"))?;
    if policy_nets.len() != 2 * options {
        return Err(section_error(
            "policies",
            format!("expected {} networks, found {}", 2 * options, policy_nets.len()),
        ));
    }
    let (online, targets): (Vec<_>, Vec<_>) = policy_nets
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 2 == 0);
    let policies = OptionPolicySet::from_nets(
        &spec,
        online.into_iter().map(|(_, n)| n).collect(),
        targets.into_iter().map(|(_, n)| n).collect(),
        config.actor_lr,
    )
    .map_err(|e| section_error("policies", e))?;

    let option_body = body("option_net");
    let option_net = match (config.mode, option_body.trim()) {
        (Mode::Td3, "none") => None,
        (Mode::Td3, _) => return Err(section_error("option_net", "td3 checkpoints carry no option network")),
        (_, "none") => return Err(section_error("option_net", "option network missing")),
        _ => {
            let end = option_body
                .find("\nend\n")
                .ok_or_else(|| section_error("option_net", "network block is not terminated"))?
                + "\nend\n".len();
            let net = DenseNet::from_text(&option_body[..end]).map_err(|e| section_error("option_net", e))?;
            let mut on = OptionNet::from_net(&spec, net, config.option_lr, config.lambda_mi, config.vat_noise_variance)
                .map_err(|e| section_error("option_net", e))?;
            let (shift, scale) = parse_scaling(&option_body[end..]).map_err(|e| section_error("option_net", e))?;
            on.set_input_scaling(shift, scale)
                .map_err(|e| section_error("option_net", e))?;
            if on.option_count() != options {
                return Err(section_error("option_net", "option count disagrees with the config"));
            }
            Some(on)
        }
    };

    let mut agent = Agent::assemble(config, seed, spec, critic, policies, option_net)?;
    agent.rngs = rngs;
    agent.set_step_count(step);
    Ok(agent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_agent(mode: Mode) -> Agent {
        let config = ExperimentConfig {
            mode,
            hidden_sizes: vec![4],
            ..ExperimentConfig::default()
        };
        Agent::new(config, 3).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for mode in [Mode::AdInfoHrl, Mode::Td3] {
            let text = to_text(&small_agent(mode));
            let again = to_text(&from_text(&text).unwrap());
            assert_eq!(text, again);
        }
    }

    #[test]
    fn damaged_section_is_named() {
        let text = to_text(&small_agent(Mode::AdInfoHrl));
        let start = text.find("[policies]").unwrap();
        let pos = start + text[start..].find("weights 0").unwrap() + 20;
        let mut bytes = text.into_bytes();
        bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
        let err = from_text(&String::from_utf8(bytes).unwrap()).unwrap_err();
        assert!(matches!(&err, Error::Checkpoint { section, .. } if section == "policies"), "{err}");
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let text = to_text(&small_agent(Mode::Td3)).replacen("adinfohrl-checkpoint 1", "adinfohrl-checkpoint 2", 1);
        assert!(matches!(from_text(&text), Err(Error::Incompatible(_))));
    }
}
