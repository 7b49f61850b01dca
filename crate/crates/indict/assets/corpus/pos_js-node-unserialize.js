const serialize = require("node-serialize");

function restore(payload) {
  return serialize.unserialize(payload);
}
