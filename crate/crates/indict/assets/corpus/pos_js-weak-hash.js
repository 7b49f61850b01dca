const crypto = require("crypto");

function fingerprint(s) {
  return crypto.createHash("md5").update(s).digest("hex");
}
