//! Exposure audit: proves from the message schema that weights cannot cross
//! the wire, cross-checks logged payload sizes against parameter-block
//! serialization sizes, and emits the per-method exposure row.

use thiserror::Error;

use super::{message_schemas, ExposureLedger, Message, MSG_BACKWARD_RSP, MSG_FORWARD_REQ};
use crate::tensor::Scalar;
use crate::vault::VaultModel;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("schema entry {0} claims to carry parameters")]
    ParameterBearingSchema(&'static str),
    #[error(
        "frame of {bytes} bytes matches the serialized size of parameter block(s): {matches}"
    )]
    SuspiciousSize { bytes: usize, matches: String },
}

/// Exposure row in the shade-comparison format.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureRow {
    pub method: String,
    pub gradients_exposed: bool,
    pub weights_exposed: bool,
    pub layer_sizes_exposed: String,
}

#[derive(Debug, Clone)]
pub struct ExposureReport {
    pub bytes_by_type: Vec<(String, usize)>,
    pub total_bytes: usize,
    pub schema_parameter_free: bool,
    pub exposure_notes: Vec<String>,
    pub row: ExposureRow,
}

impl ExposureReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("exposure report\n");
        for (name, bytes) in &self.bytes_by_type {
            out.push_str(&format!("  {name:<14} {bytes} bytes\n"));
        }
        out.push_str(&format!("  total          {} bytes\n", self.total_bytes));
        out.push_str(&format!(
            "  schema weight-transport possible: {}\n",
            if self.schema_parameter_free { "no" } else { "YES" }
        ));
        for note in &self.exposure_notes {
            out.push_str(&format!("  note: {note}\n"));
        }
        out.push_str(&format!(
            "  method={} gradients-exposed={} weights-exposed={} layer-sizes-exposed={}\n",
            self.row.method,
            if self.row.gradients_exposed { "yes" } else { "no" },
            if self.row.weights_exposed { "yes" } else { "no" },
            self.row.layer_sizes_exposed,
        ));
        out
    }
}

/// Serialized byte size of each whole-unit parameter block an exfiltration
/// attempt would need to move: the full model and each encoder.
fn parameter_block_sizes<T: Scalar>(vault: &VaultModel<T>) -> Vec<(String, usize)> {
    let scalar = std::mem::size_of::<T>();
    let total: usize = vault.param_count() * scalar;
    // Encoder splits, identical architecture on both sides.
    let per_block = 2 * 64 + 4 * (64 * 64 + 64) + 2 * 64 + (64 * 256 + 256) + (256 * 64 + 64);
    let vision = (48 * 64 + 64) + 64 + 65 * 64 + 4 * per_block + 2 * 64 + (64 * 64 + 64);
    let text = 64 * 64 + 17 * 64 + 4 * per_block + 2 * 64 + (64 * 64 + 64);
    vec![
        ("full model".into(), total),
        ("vision encoder".into(), vision * scalar),
        ("text encoder".into(), text * scalar),
    ]
}

/// Audits a completed run's ledger against the vault it spoke to.
pub fn audit_ledger<T: Scalar>(
    ledger: &ExposureLedger,
    vault: &VaultModel<T>,
    method: &str,
) -> Result<ExposureReport, AuditError> {
    // 1. Schema-level impossibility: the message set is total and no
    //    message sources payload from parameters.
    let mut exposure_notes = Vec::new();
    for schema in message_schemas() {
        if schema.carries_parameters {
            return Err(AuditError::ParameterBearingSchema(schema.name));
        }
        if let Some(note) = schema.exposure_note {
            exposure_notes.push(format!("{}: {note}", schema.name));
        }
    }

    // 2. Size cross-check: no logged frame is big enough to be a
    //    contiguous parameter block in disguise.
    let blocks = parameter_block_sizes(vault);
    for entry in &ledger.entries {
        let matches: Vec<&str> = blocks
            .iter()
            .filter(|(_, size)| entry.frame_bytes >= *size)
            .map(|(name, _)| name.as_str())
            .collect();
        if !matches.is_empty() {
            return Err(AuditError::SuspiciousSize {
                bytes: entry.frame_bytes,
                matches: matches.join(", "),
            });
        }
    }

    // 3. The Table-style exposure row, derived from what actually crossed.
    let gradients_exposed = ledger
        .entries
        .iter()
        .any(|e| e.msg_type == MSG_BACKWARD_RSP && !e.tensor_shapes.is_empty());
    let prefix_entries_used = ledger
        .entries
        .iter()
        .filter(|e| e.msg_type == MSG_FORWARD_REQ)
        .flat_map(|e| e.entry_ids.iter())
        .any(|&id| id >= 3);
    let layer_sizes_exposed = if prefix_entries_used {
        "per-layer prefix dims (partial)".to_string()
    } else {
        "input-entry-only".to_string()
    };

    Ok(ExposureReport {
        bytes_by_type: ledger
            .bytes_by_type()
            .into_iter()
            .map(|(t, b)| (Message::<f32>::type_name(t).to_string(), b))
            .collect(),
        total_bytes: ledger.total_bytes(),
        schema_parameter_free: true,
        exposure_notes,
        row: ExposureRow {
            method: method.to_string(),
            gradients_exposed,
            weights_exposed: false,
            layer_sizes_exposed,
        },
    })
}
