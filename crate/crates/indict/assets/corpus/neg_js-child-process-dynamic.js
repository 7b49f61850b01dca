const { execFile } = require("child_process");

function listDir() {
  execFile("ls", ["-la"]);
}
