//! The simulated external services: a bank, an approval service and a cloud
//! provider. Each one owns its state; the server wrapper serializes access.

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// What a tool invocation produced.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolOutcome {
    Ok(Value),
    /// A tool-level failure, reported with `isError`.
    Err { code: String, message: String, data: Value },
    /// A response the agent cannot parse; used to crash it.
    Malformed,
}

impl ToolOutcome {
    fn err(code: &str, message: impl Into<String>) -> Self {
        Self::Err {
            code: code.to_owned(),
            message: message.into(),
            data: Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub required: &'static [&'static str],
}

impl ToolSpec {
    pub fn to_value(&self) -> Value {
        let props: serde_json::Map<String, Value> = self
            .required
            .iter()
            .map(|p| (p.to_string(), json!({})))
            .collect();
        json!({
            "name": self.name,
            "description": self.description,
            "inputSchema": {"type": "object", "properties": props, "required": self.required},
        })
    }
}

pub trait ToolService: Send {
    fn name(&self) -> &str;
    fn tools(&self) -> Vec<ToolSpec>;
    /// `None` when the tool is not served here.
    fn call(&mut self, tool: &str, args: &Value, now: u64) -> Option<ToolOutcome>;
    /// Server-side state, for reports and comparisons.
    fn snapshot(&self) -> Value;
}

fn str_arg<'a>(args: &'a Value, key: &str) -> Result<&'a str, ToolOutcome> {
    args.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ToolOutcome::err("InvalidArguments", format!("`{key}` must be a string")))
}

fn int_arg(args: &Value, key: &str) -> Result<i64, ToolOutcome> {
    args.get(key)
        .and_then(Value::as_i64)
        .ok_or_else(|| ToolOutcome::err("InvalidArguments", format!("`{key}` must be an integer")))
}

fn settle(result: Result<ToolOutcome, ToolOutcome>) -> ToolOutcome {
    result.unwrap_or_else(|e| e)
}

// ---------------------------------------------------------------- bank

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub txn_id: String,
    pub reference_id: String,
    pub amount: i64,
    pub recipient: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankState {
    /// Balances in cents.
    pub balances: BTreeMap<String, i64>,
    pub transactions: Vec<Transaction>,
    pub seen_references: BTreeSet<String>,
}

impl BankState {
    /// The paying account holds $10,000; payees start empty.
    pub fn seeded() -> Self {
        let balances = [("user", 1_000_000), ("Bob", 0), ("Carol", 0), ("Dave", 0), ("Eve", 0)]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        Self {
            balances,
            transactions: Vec::new(),
            seen_references: BTreeSet::new(),
        }
    }
}

/// Transfers always debit this account.
pub const PAYER: &str = "user";

#[derive(Debug, Clone)]
pub struct Bank {
    pub state: BankState,
    /// Remaining `confirm_receipt` calls that answer with a malformed reply.
    pub crash_budget: u32,
}

impl Bank {
    pub fn new(crash_budget: u32) -> Self {
        Self {
            state: BankState::seeded(),
            crash_budget,
        }
    }

    fn transfer(&mut self, args: &Value, now: u64) -> Result<ToolOutcome, ToolOutcome> {
        let amount = int_arg(args, "amount")?;
        let recipient = str_arg(args, "recipient")?;
        let reference = str_arg(args, "reference_id")?;
        if amount < 0 {
            return Err(ToolOutcome::err("InvalidArguments", "amount must not be negative"));
        }
        if self.state.seen_references.contains(reference) {
            let original = self
                .state
                .transactions
                .iter()
                .find(|t| t.reference_id == reference)
                .map(|t| t.txn_id.clone());
            return Err(ToolOutcome::Err {
                code: "DuplicateReference".into(),
                message: format!("reference {reference} was already processed"),
                data: json!({ "original_txn": original }),
            });
        }
        if !self.state.balances.contains_key(recipient) {
            return Err(ToolOutcome::err("UnknownAccount", format!("no account `{recipient}`")));
        }
        let available = self.state.balances[PAYER];
        if available < amount {
            return Err(ToolOutcome::err(
                "InsufficientFunds",
                format!("balance {available} is below {amount}"),
            ));
        }
        *self.state.balances.get_mut(PAYER).expect("payer") -= amount;
        *self.state.balances.get_mut(recipient).expect("recipient") += amount;
        let txn = Transaction {
            txn_id: format!("txn-{:04}", self.state.transactions.len() + 1),
            reference_id: reference.to_owned(),
            amount,
            recipient: recipient.to_owned(),
            timestamp: now,
        };
        self.state.seen_references.insert(txn.reference_id.clone());
        let receipt = json!({
            "txn_id": txn.txn_id,
            "reference_id": txn.reference_id,
            "amount": amount,
            "recipient": txn.recipient,
            "timestamp": now,
            "status": "completed",
        });
        self.state.transactions.push(txn);
        Ok(ToolOutcome::Ok(receipt))
    }

    fn get_balance(&self, args: &Value) -> Result<ToolOutcome, ToolOutcome> {
        let account = str_arg(args, "account")?;
        let balance = self
            .state
            .balances
            .get(account)
            .ok_or_else(|| ToolOutcome::err("UnknownAccount", format!("no account `{account}`")))?;
        Ok(ToolOutcome::Ok(json!({ "account": account, "balance": balance })))
    }

    fn confirm_receipt(&mut self, args: &Value) -> Result<ToolOutcome, ToolOutcome> {
        let txn_id = str_arg(args, "txn_id")?;
        if self.crash_budget > 0 {
            self.crash_budget -= 1;
            return Ok(ToolOutcome::Malformed);
        }
        let known = self.state.transactions.iter().any(|t| t.txn_id == txn_id);
        Ok(ToolOutcome::Ok(json!({ "txn_id": txn_id, "confirmed": known })))
    }
}

impl ToolService for Bank {
    fn name(&self) -> &str {
        "bank"
    }

    fn tools(&self) -> Vec<ToolSpec> {
        vec![
            ToolSpec {
                name: "transfer",
                description: "Move `amount` cents from the user's account to `recipient`.",
                required: &["amount", "recipient", "reference_id"],
            },
            ToolSpec {
                name: "get_balance",
                description: "Balance of an account in cents.",
                required: &["account"],
            },
            ToolSpec {
                name: "confirm_receipt",
                description: "Ask the payee's service to confirm a transaction.",
                required: &["txn_id"],
            },
        ]
    }

    fn call(&mut self, tool: &str, args: &Value, now: u64) -> Option<ToolOutcome> {
        Some(settle(match tool {
            "transfer" => self.transfer(args, now),
            "get_balance" => self.get_balance(args),
            "confirm_receipt" => self.confirm_receipt(args),
            _ => return None,
        }))
    }

    fn snapshot(&self) -> Value {
        json!(self.state)
    }
}

// ------------------------------------------------------------ approval

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validation {
    /// Checks the signature only.
    Stateless,
    /// Also keeps a revocation set of used tokens.
    Stateful,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub action: String,
    pub target: String,
    pub approver: String,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deletion {
    pub target: String,
    /// Target the token was granted for.
    pub granted_target: String,
    pub token_digest: String,
    pub timestamp: u64,
}

impl Deletion {
    pub fn is_cross_target(&self) -> bool {
        self.target != self.granted_target
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalState {
    pub mode: Validation,
    pub issued: BTreeMap<String, Grant>,
    pub revoked: BTreeSet<String>,
    pub customers: BTreeSet<String>,
    pub deletions: Vec<Deletion>,
}

#[derive(Serialize, Deserialize)]
struct TokenBody {
    action: String,
    target: String,
    approver: String,
    #[serde(default)]
    issuer: String,
    serial: u64,
}

type HmacSha256 = Hmac<Sha256>;

const SIGNING_KEY: &[u8] = b"approval-service-signing-key";

#[derive(Debug, Clone)]
pub struct Approval {
    pub state: ApprovalState,
    /// Mixed into token payloads so separate instances never mint the same token.
    pub issuer: String,
}

fn sign(action: &str, approver: &str) -> String {
    let mut mac = HmacSha256::new_from_slice(SIGNING_KEY).expect("any key length");
    mac.update(action.as_bytes());
    mac.update(b"\n");
    mac.update(approver.as_bytes());
    hex::encode(mac.finalize().into_bytes())
}

fn verify(action: &str, approver: &str, signature: &str) -> bool {
    let Ok(raw) = hex::decode(signature) else {
        return false;
    };
    let mut mac = HmacSha256::new_from_slice(SIGNING_KEY).expect("any key length");
    mac.update(action.as_bytes());
    mac.update(b"\n");
    mac.update(approver.as_bytes());
    mac.verify_slice(&raw).is_ok()
}

fn token_digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

impl Approval {
    pub fn new(mode: Validation) -> Self {
        Self::with_issuer(mode, "approval")
    }

    pub fn with_issuer(mode: Validation, issuer: impl Into<String>) -> Self {
        Self {
            issuer: issuer.into(),
            state: ApprovalState {
                mode,
                issued: BTreeMap::new(),
                revoked: BTreeSet::new(),
                customers: ["Alice", "Bob", "Carol", "Dave"].iter().map(|s| s.to_string()).collect(),
                deletions: Vec::new(),
            },
        }
    }

    /// Tokens are `appr.<payload>.<signature>`. The signature covers the
    /// action and the approver, not the target.
    fn grant_token(&mut self, args: &Value) -> Result<ToolOutcome, ToolOutcome> {
        let body = TokenBody {
            action: str_arg(args, "action")?.to_owned(),
            target: str_arg(args, "target")?.to_owned(),
            approver: str_arg(args, "approver")?.to_owned(),
            issuer: self.issuer.clone(),
            serial: self.state.issued.len() as u64 + 1,
        };
        let signature = sign(&body.action, &body.approver);
        let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&body).expect("token body"));
        let token = format!("appr.{payload}.{signature}");
        self.state.issued.insert(
            token.clone(),
            Grant {
                action: body.action.clone(),
                target: body.target.clone(),
                approver: body.approver.clone(),
                signature,
            },
        );
        Ok(ToolOutcome::Ok(json!({
            "token": token,
            "action": body.action,
            "target": body.target,
            "approver": body.approver,
        })))
    }

    fn decode(token: &str) -> Option<(TokenBody, String)> {
        let mut parts = token.split('.');
        let (Some("appr"), Some(payload), Some(signature), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return None;
        };
        let body: TokenBody = serde_json::from_slice(&URL_SAFE_NO_PAD.decode(payload).ok()?).ok()?;
        Some((body, signature.to_owned()))
    }

    fn delete_data(&mut self, args: &Value, now: u64) -> Result<ToolOutcome, ToolOutcome> {
        let target = str_arg(args, "target")?;
        let token = str_arg(args, "token")?;
        let (body, _) = Self::decode(token)
            .filter(|(b, s)| verify(&b.action, &b.approver, s))
            .ok_or_else(|| ToolOutcome::err("InvalidSignature", "token signature does not verify"))?;
        if body.action != "delete_data" {
            return Err(ToolOutcome::err("WrongAction", format!("token authorizes `{}`", body.action)));
        }
        let digest = token_digest(token);
        if self.state.mode == Validation::Stateful && self.state.revoked.contains(&digest) {
            return Err(ToolOutcome::err("TokenRevoked", "token was already used"));
        }
        if !self.state.customers.remove(target) {
            return Err(ToolOutcome::err("UnknownCustomer", format!("no data held for `{target}`")));
        }
        if self.state.mode == Validation::Stateful {
            self.state.revoked.insert(digest.clone());
        }
        self.state.deletions.push(Deletion {
            target: target.to_owned(),
            granted_target: body.target,
            token_digest: digest,
            timestamp: now,
        });
        Ok(ToolOutcome::Ok(json!({
            "deleted": target,
            "approved_by": body.approver,
            "timestamp": now,
        })))
    }
}

impl ToolService for Approval {
    fn name(&self) -> &str {
        "approval"
    }

    fn tools(&self) -> Vec<ToolSpec> {
        vec![
            ToolSpec {
                name: "grant_token",
                description: "Manager approval: issues a single-use token for an action.",
                required: &["action", "target", "approver"],
            },
            ToolSpec {
                name: "delete_data",
                description: "Delete a customer's data; requires an approval token.",
                required: &["target", "token"],
            },
        ]
    }

    fn call(&mut self, tool: &str, args: &Value, now: u64) -> Option<ToolOutcome> {
        Some(settle(match tool {
            "grant_token" => self.grant_token(args),
            "delete_data" => self.delete_data(args, now),
            _ => return None,
        }))
    }

    fn snapshot(&self) -> Value {
        json!(self.state)
    }
}

// --------------------------------------------------------------- cloud

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Server {
    pub server_id: String,
    pub name: String,
    pub region: String,
    pub size: String,
    pub client_token: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudState {
    pub servers: Vec<Server>,
}

/// Server creation with client-token idempotency: a repeated token returns
/// the server it created the first time.
#[derive(Debug, Clone, Default)]
pub struct Cloud {
    pub state: CloudState,
}

impl Cloud {
    fn create_server(&mut self, args: &Value, now: u64) -> Result<ToolOutcome, ToolOutcome> {
        let name = str_arg(args, "name")?;
        let region = str_arg(args, "region")?;
        let size = str_arg(args, "size")?;
        let client_token = str_arg(args, "client_token")?;
        let server = match self.state.servers.iter().find(|s| s.client_token == client_token) {
            Some(existing) => existing.clone(),
            None => {
                let server = Server {
                    server_id: format!("srv-{:04}", self.state.servers.len() + 1),
                    name: name.to_owned(),
                    region: region.to_owned(),
                    size: size.to_owned(),
                    client_token: client_token.to_owned(),
                    created_at: now,
                };
                self.state.servers.push(server.clone());
                server
            }
        };
        Ok(ToolOutcome::Ok(json!(server)))
    }
}

impl ToolService for Cloud {
    fn name(&self) -> &str {
        "cloud"
    }

    fn tools(&self) -> Vec<ToolSpec> {
        vec![
            ToolSpec {
                name: "create_server",
                description: "Provision a server.",
                required: &["name", "region", "size", "client_token"],
            },
            ToolSpec {
                name: "list_servers",
                description: "Servers provisioned so far.",
                required: &[],
            },
        ]
    }

    fn call(&mut self, tool: &str, args: &Value, now: u64) -> Option<ToolOutcome> {
        Some(match tool {
            "create_server" => settle(self.create_server(args, now)),
            "list_servers" => ToolOutcome::Ok(json!({ "servers": self.state.servers })),
            _ => return None,
        })
    }

    fn snapshot(&self) -> Value {
        json!(self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(outcome: Option<ToolOutcome>) -> Value {
        match outcome {
            Some(ToolOutcome::Ok(v)) => v,
            other => panic!("expected success, got {other:?}"),
        }
    }

    fn err_code(outcome: Option<ToolOutcome>) -> String {
        match outcome {
            Some(ToolOutcome::Err { code, .. }) => code,
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn same_reference_is_rejected_as_duplicate() {
        let mut bank = Bank::new(0);
        let args = json!({"amount": 500, "recipient": "Bob", "reference_id": "uuid-A"});
        ok(bank.call("transfer", &args, 1));
        let second = bank.call("transfer", &args, 2);
        match second {
            Some(ToolOutcome::Err { code, data, .. }) => {
                assert_eq!(code, "DuplicateReference");
                assert_eq!(data["original_txn"], json!("txn-0001"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(bank.state.transactions.len(), 1);
    }

    #[test]
    fn fresh_reference_is_a_new_transaction() {
        let mut bank = Bank::new(0);
        ok(bank.call("transfer", &json!({"amount": 500, "recipient": "Bob", "reference_id": "uuid-A"}), 1));
        ok(bank.call("transfer", &json!({"amount": 500, "recipient": "Bob", "reference_id": "uuid-B"}), 2));
        assert_eq!(bank.state.transactions.len(), 2);
        assert_eq!(bank.state.balances["Bob"], 1000);
        assert_eq!(bank.state.balances[PAYER], 1_000_000 - 1000);
    }

    #[test]
    fn zero_transfer_is_accepted() {
        let mut bank = Bank::new(0);
        let receipt = ok(bank.call("transfer", &json!({"amount": 0, "recipient": "Bob", "reference_id": "uuid-C"}), 1));
        assert_eq!(receipt["status"], json!("completed"));
        assert_eq!(bank.state.balances["Bob"], 0);
    }

    #[test]
    fn bank_errors() {
        let mut bank = Bank::new(0);
        assert_eq!(
            err_code(bank.call("transfer", &json!({"amount": 1, "recipient": "Mallory", "reference_id": "r"}), 1)),
            "UnknownAccount"
        );
        assert_eq!(
            err_code(bank.call("transfer", &json!({"amount": 2_000_000, "recipient": "Bob", "reference_id": "r"}), 1)),
            "InsufficientFunds"
        );
        assert!(bank.call("no_such_tool", &json!({}), 1).is_none());
    }

    #[test]
    fn confirm_receipt_crashes_while_budget_lasts() {
        let mut bank = Bank::new(2);
        let args = json!({"txn_id": "txn-0001"});
        assert_eq!(bank.call("confirm_receipt", &args, 1), Some(ToolOutcome::Malformed));
        assert_eq!(bank.call("confirm_receipt", &args, 2), Some(ToolOutcome::Malformed));
        assert!(matches!(bank.call("confirm_receipt", &args, 3), Some(ToolOutcome::Ok(_))));
    }

    fn grant(approval: &mut Approval, target: &str) -> String {
        let v = ok(approval.call(
            "grant_token",
            &json!({"action": "delete_data", "target": target, "approver": "manager"}),
            1,
        ));
        v["token"].as_str().unwrap().to_owned()
    }

    #[test]
    fn stateless_accepts_a_token_for_any_target() {
        let mut approval = Approval::new(Validation::Stateless);
        let token = grant(&mut approval, "Alice");
        ok(approval.call("delete_data", &json!({"target": "Alice", "token": token}), 2));
        ok(approval.call("delete_data", &json!({"target": "Bob", "token": token}), 3));
        let cross: Vec<bool> = approval.state.deletions.iter().map(Deletion::is_cross_target).collect();
        assert_eq!(cross, vec![false, true]);
    }

    #[test]
    fn stateful_revokes_after_first_use() {
        let mut approval = Approval::new(Validation::Stateful);
        let token = grant(&mut approval, "Alice");
        ok(approval.call("delete_data", &json!({"target": "Alice", "token": token}), 2));
        assert_eq!(
            err_code(approval.call("delete_data", &json!({"target": "Bob", "token": token}), 3)),
            "TokenRevoked"
        );
        assert_eq!(approval.state.deletions.len(), 1);
    }

    #[test]
    fn forged_token_is_rejected() {
        let mut approval = Approval::new(Validation::Stateless);
        let token = grant(&mut approval, "Alice");
        let forged = format!("{}00", &token[..token.len() - 2]);
        assert_eq!(
            err_code(approval.call("delete_data", &json!({"target": "Bob", "token": forged}), 2)),
            "InvalidSignature"
        );
        assert_eq!(
            err_code(approval.call("delete_data", &json!({"target": "Bob", "token": "garbage"}), 2)),
            "InvalidSignature"
        );
    }

    #[test]
    fn cloud_deduplicates_client_tokens() {
        let mut cloud = Cloud::default();
        let args = json!({"name": "web", "region": "eu", "size": "s", "client_token": "ct-1"});
        let a = ok(cloud.call("create_server", &args, 1));
        let b = ok(cloud.call("create_server", &args, 2));
        assert_eq!(a, b);
        let mut other = args.clone();
        other["client_token"] = json!("ct-2");
        ok(cloud.call("create_server", &other, 3));
        assert_eq!(cloud.state.servers.len(), 2);
    }
}
