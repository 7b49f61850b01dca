const crypto = require("crypto");

function fingerprint(s) {
  return crypto.createHash("sha256").update(s).digest("hex");
}
