from csst.main import app

app(prog_name="csst")
