//! Remote access to a station's sandboxed file system.
//!
//! Commands (`cmd` field):
//! - `LIST {path}` → `{entries: [{name, kind, size}]}`
//! - `STAT {path}` → `{name, kind, size}`
//! - `READ {path, transport: CONTROL, offset, length}` → `{data, offset, size, eof}`
//! - `WRITE {path, transport: CONTROL, offset, data}` → `{size}`
//! - `READ|WRITE {path, transport: STREAM, length?}` → handed to the station
//!   as a [`StreamPlan`].

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    decode_state, encode_state, str_field, AgentContext, Behavior, BehaviorAction, BehaviorError, BehaviorFactory,
    CommandOutcome, StreamPlan,
};
use crate::wire::{b64_decode, b64_encode};

/// Raw bytes per CONTROL chunk; base64 brings this to 256 KiB on the wire.
pub const CONTROL_CHUNK: usize = 192 * 1024;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileAccessState {
    #[serde(default)]
    pub commands_served: u64,
}

#[derive(Debug, Default)]
pub struct FileAccess {
    pub state: FileAccessState,
}

fn transport(cmd: &Value) -> Result<&str, BehaviorError> {
    match cmd.get("transport").and_then(Value::as_str).unwrap_or("CONTROL") {
        t @ ("CONTROL" | "STREAM") => Ok(t),
        other => Err(BehaviorError::new("BAD_COMMAND", format!("unknown transport {other}"))),
    }
}

fn u64_field(cmd: &Value, key: &str) -> Result<Option<u64>, BehaviorError> {
    match cmd.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| BehaviorError::new("BAD_COMMAND", format!("{key} must be a non-negative integer"))),
    }
}

impl FileAccess {
    fn read(&self, ctx: &AgentContext, cmd: &Value) -> Result<CommandOutcome, BehaviorError> {
        let path = str_field(cmd, "path")?;
        if transport(cmd)? == "STREAM" {
            let info = ctx.fs.stat(path)?;
            if info.kind != super::sandbox::EntryKind::File {
                return Err(BehaviorError::new("IO_ERROR", format!("{path}: not a regular file")));
            }
            return Ok(CommandOutcome::Stream(StreamPlan::Read { path: ctx.fs.resolve(path)?, size: info.size }));
        }
        let offset = u64_field(cmd, "offset")?.unwrap_or(0);
        let length = (u64_field(cmd, "length")?.unwrap_or(CONTROL_CHUNK as u64) as usize).min(CONTROL_CHUNK);
        let (data, size) = ctx.fs.read_range(path, offset, length)?;
        let end = offset + data.len() as u64;
        Ok(CommandOutcome::Reply(json!({
            "data": b64_encode(&data),
            "offset": offset,
            "size": size,
            "eof": end >= size,
        })))
    }

    fn write(&self, ctx: &AgentContext, cmd: &Value) -> Result<CommandOutcome, BehaviorError> {
        let path = str_field(cmd, "path")?;
        if transport(cmd)? == "STREAM" {
            let length = u64_field(cmd, "length")?
                .ok_or_else(|| BehaviorError::new("BAD_COMMAND", "STREAM WRITE needs length"))?;
            return Ok(CommandOutcome::Stream(StreamPlan::Write { path: ctx.fs.resolve(path)?, length }));
        }
        let offset = u64_field(cmd, "offset")?.unwrap_or(0);
        let data = b64_decode(str_field(cmd, "data")?).map_err(|e| BehaviorError::new("BAD_COMMAND", e))?;
        if data.len() > CONTROL_CHUNK {
            return Err(BehaviorError::new("BAD_COMMAND", format!("chunk exceeds {CONTROL_CHUNK} bytes")));
        }
        let size = ctx.fs.write_at(path, offset, &data)?;
        Ok(CommandOutcome::Reply(json!({ "size": size })))
    }
}

impl Behavior for FileAccess {
    fn step(&mut self, _ctx: &mut AgentContext) -> Result<BehaviorAction, BehaviorError> {
        Ok(BehaviorAction::Continue)
    }

    fn handle_command(&mut self, ctx: &mut AgentContext, cmd: &Value) -> Result<CommandOutcome, BehaviorError> {
        let name = str_field(cmd, "cmd")?;
        let out = match name {
            "LIST" => {
                let entries = ctx.fs.list(cmd.get("path").and_then(Value::as_str).unwrap_or(""))?;
                CommandOutcome::Reply(json!({ "entries": entries }))
            }
            "STAT" => CommandOutcome::Reply(json!(ctx.fs.stat(str_field(cmd, "path")?)?)),
            "READ" => self.read(ctx, cmd)?,
            "WRITE" => self.write(ctx, cmd)?,
            other => return Err(BehaviorError::unsupported(other)),
        };
        self.state.commands_served += 1;
        Ok(out)
    }

    fn save_state(&self) -> Vec<u8> {
        encode_state(&self.state)
    }
}

pub struct Factory;

impl BehaviorFactory for Factory {
    fn behavior_id(&self) -> &'static str {
        super::FILE_ACCESS
    }

    fn initial_state(&self, params: &Value) -> Result<Vec<u8>, BehaviorError> {
        match params {
            Value::Null => {}
            Value::Object(m) if m.is_empty() => {}
            _ => return Err(BehaviorError::bad_params("file-access takes no parameters")),
        }
        Ok(encode_state(&FileAccessState::default()))
    }

    fn restore(&self, state: &[u8]) -> Result<Box<dyn Behavior>, BehaviorError> {
        Ok(Box::new(FileAccess { state: decode_state(state)? }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::testing::{ctx, fixture};

    fn run(a: &mut FileAccess, c: &mut AgentContext, cmd: Value) -> Result<Value, BehaviorError> {
        match a.handle_command(c, &cmd)? {
            CommandOutcome::Reply(v) => Ok(v),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn control_round_trip() {
        let fx = fixture();
        let mut c = ctx(&fx, "A", "a:1", vec![]);
        let mut a = FileAccess::default();
        let data: Vec<u8> = (0..CONTROL_CHUNK + 10).map(|i| (i % 251) as u8).collect();
        let (first, rest) = data.split_at(CONTROL_CHUNK);
        run(&mut a, &mut c, json!({"cmd": "WRITE", "path": "f", "offset": 0, "data": b64_encode(first)})).unwrap();
        let r = run(&mut a, &mut c, json!({"cmd": "WRITE", "path": "f", "offset": CONTROL_CHUNK, "data": b64_encode(rest)})).unwrap();
        assert_eq!(r["size"], data.len());

        let mut got = Vec::new();
        loop {
            let r = run(&mut a, &mut c, json!({"cmd": "READ", "path": "f", "offset": got.len(), "length": CONTROL_CHUNK})).unwrap();
            assert!(r["data"].as_str().unwrap().len() <= 256 * 1024);
            got.extend(b64_decode(r["data"].as_str().unwrap()).unwrap());
            if r["eof"].as_bool().unwrap() {
                break;
            }
        }
        assert_eq!(got, data);
        let r = run(&mut a, &mut c, json!({"cmd": "LIST", "path": ""})).unwrap();
        assert_eq!(r["entries"][0]["name"], "f");
        assert_eq!(r["entries"][0]["kind"], "file");
    }

    #[test]
    fn sandbox_errors_surface() {
        let fx = fixture();
        let mut c = ctx(&fx, "A", "a:1", vec![]);
        let mut a = FileAccess::default();
        let e = run(&mut a, &mut c, json!({"cmd": "READ", "path": "../../etc/x"})).unwrap_err();
        assert_eq!(e.code, "SANDBOX_VIOLATION");
        let e = run(&mut a, &mut c, json!({"cmd": "STAT", "path": "nope"})).unwrap_err();
        assert_eq!(e.code, "NOT_FOUND");
        let e = a.handle_command(&mut c, &json!({"cmd": "READ", "path": "/etc/passwd", "transport": "STREAM"})).unwrap_err();
        assert_eq!(e.code, "SANDBOX_VIOLATION");
    }

    #[test]
    fn stream_commands_return_plans() {
        let fx = fixture();
        std::fs::write(fx.fs.root().join("big"), vec![7u8; 1000]).unwrap();
        let mut c = ctx(&fx, "A", "a:1", vec![]);
        let mut a = FileAccess::default();
        let out = a.handle_command(&mut c, &json!({"cmd": "READ", "path": "big", "transport": "STREAM"})).unwrap();
        assert_eq!(out, CommandOutcome::Stream(StreamPlan::Read { path: fx.fs.root().join("big"), size: 1000 }));
        let out = a.handle_command(&mut c, &json!({"cmd": "WRITE", "path": "w", "transport": "STREAM", "length": 5})).unwrap();
        assert!(matches!(out, CommandOutcome::Stream(StreamPlan::Write { length: 5, .. })));
    }
}
